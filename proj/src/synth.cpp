#include "vibiknet/synth.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <numeric>
#include <random>

namespace vibik {
namespace {

constexpr Index kModesPerConcept = 3;
constexpr Index kBackgroundModes = 2;
constexpr double kConceptRegionRate = 0.75;
constexpr double kRegionNoise = 0.3;

struct Pattern {
  AnswerType type;
  std::vector<std::string> templates;  // "{}" is replaced by a noun
  std::vector<std::string> answers;
};

const std::array<const char*, 24> kNouns = {
    "dog",   "cat",    "car",   "tree",  "person", "bus",   "chair", "table",
    "horse", "bird",   "boat",  "train", "plate",  "cup",   "kite",  "sign",
    "truck", "bench",  "clock", "bed",   "phone",  "couch", "bowl",  "bottle"};
const std::array<const char*, 11> kColors = {"red",   "blue",  "green", "yellow", "white", "black",
                                             "brown", "orange", "pink", "purple", "gray"};
const std::array<const char*, 9> kNumbers = {"2", "3", "4", "5", "6", "7", "8", "9", "10"};

std::vector<Pattern> make_patterns(Index answers) {
  const Index yes_no = std::min<Index>(2, answers);
  const Index rest = answers - yes_no;
  const Index numbers = rest / 2;
  const Index colors = rest - numbers;

  std::vector<Pattern> patterns;
  Pattern yn{AnswerType::kYesNo,
             {"is there a {} in the picture", "can you see a {}", "is the {} visible"},
             {}};
  const std::array<const char*, 2> yn_words = {"yes", "no"};
  for (Index i = 0; i < yes_no; ++i) yn.answers.emplace_back(yn_words[i]);

  Pattern num{AnswerType::kNumber,
              {"how many {} are there", "how many {} can you count", "what number of {} is shown"},
              {}};
  for (Index i = 0; i < numbers; ++i) {
    num.answers.push_back(i < static_cast<Index>(kNumbers.size()) ? std::string(kNumbers[i])
                                                                  : std::to_string(i + 2));
  }

  Pattern col{AnswerType::kOther,
              {"what color is the {}", "what is the color of the {}", "which color does the {} have"},
              {}};
  for (Index i = 0; i < colors; ++i) {
    col.answers.push_back(i < static_cast<Index>(kColors.size()) ? std::string(kColors[i])
                                                                 : "color" + std::to_string(i));
  }
  for (auto* p : {&yn, &num, &col}) {
    if (!p->answers.empty()) patterns.push_back(std::move(*p));
  }
  return patterns;
}

std::string fill(const std::string& tmpl, const std::string& noun) {
  std::string out = tmpl;
  out.replace(out.find("{}"), 2, noun);
  out[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[0])));
  return out + "?";
}

std::size_t template_word_count(const std::vector<Pattern>& patterns) {
  std::vector<std::string> words;
  for (const auto& p : patterns) {
    for (const auto& t : p.templates) {
      for (auto& w : tokenize(t)) words.push_back(std::move(w));
    }
  }
  std::sort(words.begin(), words.end());
  return static_cast<std::size_t>(std::unique(words.begin(), words.end()) - words.begin());
}

}  // namespace

void validate(const SynthSpec& s) {
  if (s.images < 1 || s.regions < 1 || s.dim < 1 || s.questions_per_image < 1 ||
      s.vocab_size < 1 || s.answers < 1 || s.concepts < 1) {
    throw InvalidValue("synthetic corpus sizes must be positive");
  }
  if (s.test_fraction < 0.0 || s.test_fraction >= 1.0) {
    throw InvalidValue("test_fraction must lie in [0, 1)");
  }
}

SynthCorpus synth_generate(std::uint64_t seed, const SynthSpec& spec) {
  validate(spec);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform_index = [&](std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  };

  const auto patterns = make_patterns(spec.answers);

  // Filler nouns bring the question vocabulary to roughly vocab_size words.
  const auto fixed_words = template_word_count(patterns);
  const std::size_t noun_count =
      std::max<std::size_t>(1, static_cast<std::size_t>(spec.vocab_size) > fixed_words
                                   ? static_cast<std::size_t>(spec.vocab_size) - fixed_words
                                   : 1);
  std::vector<std::string> nouns;
  for (std::size_t i = 0; i < noun_count; ++i) {
    nouns.push_back(i < kNouns.size() ? std::string(kNouns[i]) : "item" + std::to_string(i));
  }

  // Planted mixtures: per-concept modes plus shared background modes.
  auto draw_mode = [&]() {
    Vector v(spec.dim);
    for (Index j = 0; j < spec.dim; ++j) v(j) = normal(rng);
    return v;
  };
  std::vector<std::vector<Vector>> concept_modes(spec.concepts);
  for (auto& modes : concept_modes)
    for (Index k = 0; k < kModesPerConcept; ++k) modes.push_back(draw_mode());
  std::vector<Vector> background;
  for (Index k = 0; k < kBackgroundModes; ++k) background.push_back(draw_mode());

  // answer_table[c][p] indexes into patterns[p].answers. Concepts cycle through a
  // shuffled answer order so every answer is used once there are enough concepts.
  std::vector<std::vector<std::size_t>> answer_table(spec.concepts);
  for (const auto& p : patterns) {
    std::vector<std::size_t> perm(p.answers.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t c = 0; c < answer_table.size(); ++c) answer_table[c].push_back(perm[c % perm.size()]);
  }

  std::vector<std::string> all_answers;
  for (const auto& p : patterns) all_answers.insert(all_answers.end(), p.answers.begin(), p.answers.end());

  std::vector<Index> order(spec.images);
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), rng);
  const auto test_count = static_cast<Index>(spec.test_fraction * static_cast<double>(spec.images));
  std::vector<bool> is_test(spec.images, false);
  for (Index i = 0; i < test_count; ++i) is_test[order[i]] = true;

  SynthCorpus corpus;
  for (Index img = 0; img < spec.images; ++img) {
    const Index concept_id = img % spec.concepts;
    corpus.image_concepts.push_back(concept_id);

    char id[32];
    std::snprintf(id, sizeof(id), "img%05ld", static_cast<long>(img));
    RegionDescriptorSet set;
    set.image_id = id;
    set.descriptors.resize(spec.regions, spec.dim);
    for (Index r = 0; r < spec.regions; ++r) {
      const bool from_concept = unit(rng) < kConceptRegionRate;
      const Vector& mode = from_concept
                               ? concept_modes[concept_id][uniform_index(kModesPerConcept)]
                               : background[uniform_index(kBackgroundModes)];
      for (Index j = 0; j < spec.dim; ++j) set.descriptors(r, j) = mode(j) + kRegionNoise * normal(rng);
    }
    corpus.descriptors.push_back(std::move(set));

    for (Index q = 0; q < spec.questions_per_image; ++q) {
      const std::size_t p = uniform_index(patterns.size());
      const Pattern& pattern = patterns[p];
      QaRecord rec;
      rec.image_id = id;
      rec.question = fill(pattern.templates[uniform_index(pattern.templates.size())],
                          nouns[uniform_index(nouns.size())]);
      rec.tokens = tokenize(rec.question);
      rec.answer_type = pattern.type;
      rec.split = is_test[img] ? "test" : "train";

      const std::string truth = pattern.answers[answer_table[concept_id][p]];
      const std::size_t agreeing = 6 + uniform_index(5);  // 6..10 annotators agree
      for (std::size_t a = 0; a < kHumanAnswers; ++a) {
        if (a < agreeing || all_answers.size() < 2) {
          rec.answers.push_back(truth);
        } else {
          std::string other;
          do {
            other = all_answers[uniform_index(all_answers.size())];
          } while (other == truth);
          rec.answers.push_back(other);
        }
      }
      std::shuffle(rec.answers.begin(), rec.answers.end(), rng);
      corpus.records.push_back(std::move(rec));
    }
  }
  return corpus;
}

void synth_write(const SynthCorpus& corpus, const std::string& descriptor_path,
                 const std::string& dataset_path) {
  save_descriptors(descriptor_path, corpus.descriptors);
  save_dataset(dataset_path, corpus.records);
}

}  // namespace vibik
