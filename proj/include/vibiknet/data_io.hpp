#pragma once

// File formats:
//   descriptors  binary "VIBIKDESC" container, little-endian
//   embeddings   the same container with one row per image
//   datasets     JSON lines, one question per line
//   encoder      binary "VIBIKENC1" archive with CRC-32 of the payload
//   model        binary "VIBIKNET1" archive (model + encoder) with CRC-32

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "vibiknet/fisher_encoder.hpp"
#include "vibiknet/fusion_model.hpp"

namespace vibik {

inline constexpr std::string_view kDescriptorMagic = "VIBIKDESC";
inline constexpr std::string_view kEncoderMagic = "VIBIKENC1";
inline constexpr std::string_view kModelMagic = "VIBIKNET1";
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::size_t kHumanAnswers = 10;

enum class AnswerType { kYesNo, kNumber, kOther };

std::string to_string(AnswerType type);
/// Accepts "yes/no", "number" and "other".
AnswerType parse_answer_type(std::string_view name);

struct QaRecord {
  std::string image_id;
  std::string question;
  std::vector<std::string> tokens;
  std::vector<std::string> answers;  // exactly ten, normalized
  AnswerType answer_type = AnswerType::kOther;
  std::string split = "train";

  friend bool operator==(const QaRecord&, const QaRecord&) = default;
};

/// Most common human answer; ties go to the lexicographically smallest.
std::string majority_answer(const QaRecord& record);

using DescriptorMap = std::map<std::string, RegionDescriptorSet>;
using EmbeddingMap = std::map<std::string, ImageEmbedding>;

void write_descriptors(std::ostream& out, const std::vector<RegionDescriptorSet>& sets);
std::vector<RegionDescriptorSet> read_descriptors(std::istream& in);
void save_descriptors(const std::string& path, const std::vector<RegionDescriptorSet>& sets);
DescriptorMap load_descriptors(const std::string& path);

void save_embeddings(const std::string& path, const EmbeddingMap& embeddings);
EmbeddingMap load_embeddings(const std::string& path);

QaRecord parse_record(std::string_view json_line, std::size_t line_no);
std::string format_record(const QaRecord& record);
std::vector<QaRecord> read_dataset(std::istream& in);
std::vector<QaRecord> load_dataset(const std::string& path);
void save_dataset(const std::string& path, const std::vector<QaRecord>& records);

std::string serialize_encoder(const FisherEncoder& encoder);
FisherEncoder parse_encoder(std::string_view bytes);
void save_encoder(const std::string& path, const FisherEncoder& encoder);
FisherEncoder load_encoder(const std::string& path);

struct ModelArchive {
  VqaModel model;
  FisherEncoder encoder;
};

std::string serialize_model(const VqaModel& model, const FisherEncoder& encoder);
ModelArchive parse_model(std::string_view bytes);
void save_model(const VqaModel& model, const FisherEncoder& encoder, const std::string& path);
ModelArchive load_model(const std::string& path);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

}  // namespace vibik
