#pragma once

// Desk-scale synthetic VQA corpus. Every image has a latent concept; region
// descriptors are drawn from a concept-specific Gaussian mixture mixed with
// shared background modes, and every question pattern maps the concept to one
// answer of that pattern's answer group. The answer is therefore a
// deterministic function of (concept, question pattern).

#include <cstdint>
#include <string>
#include <vector>

#include "vibiknet/data_io.hpp"

namespace vibik {

struct SynthSpec {
  Index images = 96;
  Index regions = 12;
  Index dim = 32;
  Index questions_per_image = 4;
  Index vocab_size = 40;
  Index answers = 8;
  Index concepts = 6;
  double test_fraction = 0.25;
};

void validate(const SynthSpec& spec);

struct SynthCorpus {
  std::vector<RegionDescriptorSet> descriptors;
  std::vector<QaRecord> records;
  std::vector<Index> image_concepts;  // latent concept of every image, in image order
};

SynthCorpus synth_generate(std::uint64_t seed, const SynthSpec& spec);

void synth_write(const SynthCorpus& corpus, const std::string& descriptor_path,
                 const std::string& dataset_path);

}  // namespace vibik
