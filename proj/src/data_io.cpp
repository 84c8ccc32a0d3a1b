#include "vibiknet/data_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <fstream>
#include <iterator>
#include <sstream>

#include "json.hpp"

namespace vibik {
namespace {

using json = nlohmann::ordered_json;

class ByteWriter {
 public:
  void bytes(std::string_view b) { buf_.append(b); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  void matrix(const Matrix& m) {
    u64(static_cast<std::uint64_t>(m.rows()));
    u64(static_cast<std::uint64_t>(m.cols()));
    for (Index j = 0; j < m.cols(); ++j)
      for (Index i = 0; i < m.rows(); ++i) f64(m(i, j));
  }
  void vector(const Vector& v) {
    u64(static_cast<std::uint64_t>(v.size()));
    for (Index i = 0; i < v.size(); ++i) f64(v(i));
  }
  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(std::string_view data, std::size_t base_offset = 0) : data_(data), base_(base_offset) {}

  std::size_t offset() const { return base_ + pos_; }
  bool at_end() const { return pos_ == data_.size(); }

  std::string_view bytes(std::size_t n) {
    need(n);
    auto out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  std::uint32_t u32() {
    const auto b = bytes(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[i]);
    return v;
  }
  std::uint64_t u64() {
    const auto b = bytes(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[i]);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() { return std::string(bytes(u32())); }
  Index count(std::uint64_t limit_per_item) {
    const std::uint64_t n = u64();
    if (limit_per_item > 0 && n > (data_.size() - pos_) / limit_per_item) {
      throw CorruptFile("declared size exceeds remaining data", offset());
    }
    return static_cast<Index>(n);
  }
  Matrix matrix() {
    const Index rows = count(0);
    const Index cols = count(0);
    if (rows != 0 && static_cast<std::uint64_t>(cols) > (data_.size() - pos_) / 8 / static_cast<std::uint64_t>(rows)) {
      throw CorruptFile("matrix larger than remaining data", offset());
    }
    Matrix m(rows, cols);
    for (Index j = 0; j < cols; ++j)
      for (Index i = 0; i < rows; ++i) m(i, j) = f64();
    return m;
  }
  Vector vector() {
    const Index n = count(8);
    Vector v(n);
    for (Index i = 0; i < n; ++i) v(i) = f64();
    return v;
  }

 private:
  void need(std::size_t n) const {
    if (n > data_.size() - pos_) {
      throw CorruptFile("truncated: need " + std::to_string(n) + " bytes, " +
                            std::to_string(data_.size() - pos_) + " left",
                        offset());
    }
  }

  std::string_view data_;
  std::size_t base_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

// magic | u32 version | u64 payload size | u32 crc32(payload) | payload
std::string wrap_archive(std::string_view magic, const std::string& payload) {
  ByteWriter w;
  w.bytes(magic);
  w.u32(kFormatVersion);
  w.u64(payload.size());
  w.u32(crc32_of(payload));
  w.bytes(payload);
  return w.data();
}

std::string_view unwrap_archive(std::string_view magic, std::string_view bytes, std::size_t& payload_offset) {
  if (bytes.size() < magic.size() || bytes.substr(0, magic.size()) != magic) {
    throw FormatError("bad magic, expected '" + std::string(magic) + "'");
  }
  ByteReader r(bytes.substr(magic.size()), magic.size());
  const std::uint32_t version = r.u32();
  if (version != kFormatVersion) {
    throw UnsupportedVersion("archive version " + std::to_string(version) + ", supported " +
                             std::to_string(kFormatVersion));
  }
  const std::uint64_t size = r.u64();
  const std::uint32_t crc = r.u32();
  payload_offset = r.offset();
  const std::string_view payload = r.bytes(size);
  if (!r.at_end()) throw CorruptFile("trailing bytes after payload", r.offset());
  if (crc32_of(payload) != crc) throw CorruptFile("payload checksum mismatch", payload_offset);
  return payload;
}

void write_pca(ByteWriter& w, const PcaModel<double>& p) {
  w.vector(p.mean);
  w.matrix(p.basis);
  w.vector(p.eigenvalues);
  w.u32(p.whiten ? 1 : 0);
  w.f64(p.epsilon);
}

PcaModel<double> read_pca(ByteReader& r) {
  PcaModel<double> p;
  p.mean = r.vector();
  p.basis = r.matrix();
  p.eigenvalues = r.vector();
  p.whiten = r.u32() != 0;
  p.epsilon = r.f64();
  if (p.mean.size() != p.basis.rows() || p.eigenvalues.size() != p.basis.cols()) {
    throw CorruptFile("inconsistent PCA shapes", r.offset());
  }
  return p;
}

void write_encoder(ByteWriter& w, const FisherEncoder& e) {
  const EncoderConfig& c = e.config;
  w.u64(static_cast<std::uint64_t>(c.pca_dim));
  w.u64(static_cast<std::uint64_t>(c.components));
  w.u64(static_cast<std::uint64_t>(c.embedding_dim));
  w.u64(c.seed);
  w.u32(static_cast<std::uint32_t>(c.gmm_max_iters));
  w.f64(c.gmm_tol);
  w.u32(c.whiten_pre ? 1 : 0);
  w.u32(c.whiten_post ? 1 : 0);
  w.f64(c.pca_epsilon);
  write_pca(w, e.pre_pca);
  w.vector(e.gmm.weights);
  w.matrix(e.gmm.means);
  w.matrix(e.gmm.variances);
  write_pca(w, e.post_pca);
}

FisherEncoder read_encoder(ByteReader& r) {
  FisherEncoder e;
  EncoderConfig& c = e.config;
  c.pca_dim = static_cast<Index>(r.u64());
  c.components = static_cast<Index>(r.u64());
  c.embedding_dim = static_cast<Index>(r.u64());
  c.seed = r.u64();
  c.gmm_max_iters = static_cast<int>(r.u32());
  c.gmm_tol = r.f64();
  c.whiten_pre = r.u32() != 0;
  c.whiten_post = r.u32() != 0;
  c.pca_epsilon = r.f64();
  e.pre_pca = read_pca(r);
  e.gmm.weights = r.vector();
  e.gmm.means = r.matrix();
  e.gmm.variances = r.matrix();
  e.post_pca = read_pca(r);
  if (e.gmm.means.rows() != e.gmm.weights.size() || e.gmm.variances.rows() != e.gmm.weights.size() ||
      e.gmm.means.cols() != e.pre_pca.output_dim() || e.gmm.variances.cols() != e.pre_pca.output_dim() ||
      e.post_pca.input_dim() != e.fisher_dim()) {
    throw CorruptFile("inconsistent encoder shapes", r.offset());
  }
  return e;
}

void write_strings(ByteWriter& w, const std::vector<std::string>& items) {
  w.u32(static_cast<std::uint32_t>(items.size()));
  for (const auto& s : items) w.str(s);
}

std::vector<std::string> read_strings(ByteReader& r) {
  const std::uint32_t n = r.u32();
  std::vector<std::string> out;
  for (std::uint32_t i = 0; i < n; ++i) out.push_back(r.str());
  return out;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return in;
}

}  // namespace

std::string to_string(AnswerType type) {
  switch (type) {
    case AnswerType::kYesNo: return "yes/no";
    case AnswerType::kNumber: return "number";
    case AnswerType::kOther: return "other";
  }
  return "other";
}

AnswerType parse_answer_type(std::string_view name) {
  const auto norm = normalize_answer(name);
  if (norm == "yes/no") return AnswerType::kYesNo;
  if (norm == "number") return AnswerType::kNumber;
  if (norm == "other") return AnswerType::kOther;
  throw ValidationError("unknown answer_type '" + std::string(name) + "'", 0);
}

std::string majority_answer(const QaRecord& record) {
  std::map<std::string, int> counts;
  for (const auto& a : record.answers) ++counts[normalize_answer(a)];
  std::string best;
  int best_count = 0;
  for (const auto& [answer, count] : counts) {
    if (count > best_count) {
      best = answer;
      best_count = count;
    }
  }
  return best;
}

std::string read_file(const std::string& path) {
  auto in = open_in(path);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for '" + path + "'");
}

void write_descriptors(std::ostream& out, const std::vector<RegionDescriptorSet>& sets) {
  const Index dim = sets.empty() ? 0 : sets.front().descriptors.cols();
  ByteWriter w;
  w.bytes(kDescriptorMagic);
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(dim));
  for (const auto& set : sets) {
    if (set.descriptors.cols() != dim) {
      throw DimensionError("image '" + set.image_id + "' has descriptor dim " +
                           std::to_string(set.descriptors.cols()) + ", container uses " +
                           std::to_string(dim));
    }
    w.str(set.image_id);
    w.u32(static_cast<std::uint32_t>(set.descriptors.rows()));
    for (Index i = 0; i < set.descriptors.rows(); ++i)
      for (Index j = 0; j < dim; ++j) w.f64(set.descriptors(i, j));
  }
  out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
}

std::vector<RegionDescriptorSet> read_descriptors(std::istream& in) {
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string_view view(bytes);
  if (view.size() < kDescriptorMagic.size() || view.substr(0, kDescriptorMagic.size()) != kDescriptorMagic) {
    throw FormatError("bad descriptor magic, expected 'VIBIKDESC'");
  }
  ByteReader r(view.substr(kDescriptorMagic.size()), kDescriptorMagic.size());
  const std::uint32_t version = r.u32();
  if (version != kFormatVersion) {
    throw FormatError("unsupported descriptor version " + std::to_string(version));
  }
  const Index dim = r.u32();
  std::vector<RegionDescriptorSet> sets;
  while (!r.at_end()) {
    if (dim == 0) throw FormatError("descriptor dimension 0 with non-empty payload");
    RegionDescriptorSet set;
    const std::size_t record_offset = r.offset();
    set.image_id = r.str();
    const Index n = r.u32();
    if (n == 0) throw CorruptFile("image '" + set.image_id + "' has no regions", record_offset);
    set.descriptors.resize(n, dim);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < dim; ++j) set.descriptors(i, j) = r.f64();
    if (!set.descriptors.allFinite()) {
      throw CorruptFile("non-finite descriptor value in image '" + set.image_id + "'", record_offset);
    }
    sets.push_back(std::move(set));
  }
  return sets;
}

void save_descriptors(const std::string& path, const std::vector<RegionDescriptorSet>& sets) {
  std::ostringstream out;
  write_descriptors(out, sets);
  write_file(path, out.str());
}

DescriptorMap load_descriptors(const std::string& path) {
  auto in = open_in(path);
  DescriptorMap out;
  for (auto& set : read_descriptors(in)) {
    const std::string id = set.image_id;
    if (!out.emplace(id, std::move(set)).second) {
      throw FormatError("duplicate image id '" + id + "' in '" + path + "'");
    }
  }
  return out;
}

void save_embeddings(const std::string& path, const EmbeddingMap& embeddings) {
  std::vector<RegionDescriptorSet> rows;
  rows.reserve(embeddings.size());
  for (const auto& [id, e] : embeddings) rows.push_back({id, e.phi.transpose()});
  save_descriptors(path, rows);
}

EmbeddingMap load_embeddings(const std::string& path) {
  EmbeddingMap out;
  for (auto& [id, set] : load_descriptors(path)) {
    if (set.descriptors.rows() != 1) {
      throw FormatError("embedding file entry '" + id + "' has " +
                        std::to_string(set.descriptors.rows()) + " rows, expected 1");
    }
    out[id] = ImageEmbedding{id, set.descriptors.row(0).transpose()};
  }
  return out;
}

QaRecord parse_record(std::string_view json_line, std::size_t line_no) {
  json j;
  try {
    j = json::parse(json_line);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("invalid JSON: ") + e.what(), line_no);
  }
  if (!j.is_object()) throw ValidationError("record must be a JSON object", line_no);
  auto field = [&](const char* name) -> const json& {
    if (!j.contains(name)) throw ValidationError(std::string("missing field '") + name + "'", line_no);
    return j.at(name);
  };
  auto text = [&](const char* name) {
    const json& v = field(name);
    if (!v.is_string()) throw ValidationError(std::string("field '") + name + "' must be a string", line_no);
    return v.get<std::string>();
  };

  QaRecord rec;
  rec.image_id = text("image_id");
  rec.question = text("question");
  const json& answers = field("answers");
  if (!answers.is_array()) throw ValidationError("field 'answers' must be an array", line_no);
  if (answers.size() != kHumanAnswers) {
    throw ValidationError("expected 10 answers, got " + std::to_string(answers.size()), line_no);
  }
  for (const auto& a : answers) {
    if (!a.is_string()) throw ValidationError("answers must be strings", line_no);
    rec.answers.push_back(normalize_answer(a.get<std::string>()));
  }
  try {
    rec.answer_type = parse_answer_type(text("answer_type"));
  } catch (const ValidationError& e) {
    throw ValidationError(e.what(), line_no);
  }
  if (j.contains("split")) rec.split = text("split");
  rec.tokens = tokenize(rec.question);
  if (rec.tokens.empty()) throw ValidationError("question has no tokens", line_no);
  return rec;
}

std::string format_record(const QaRecord& record) {
  json j;
  j["image_id"] = record.image_id;
  j["question"] = record.question;
  j["answers"] = record.answers;
  j["answer_type"] = to_string(record.answer_type);
  j["split"] = record.split;
  return j.dump();
}

std::vector<QaRecord> read_dataset(std::istream& in) {
  std::vector<QaRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_record(line, line_no));
  }
  return out;
}

std::vector<QaRecord> load_dataset(const std::string& path) {
  auto in = open_in(path);
  return read_dataset(in);
}

void save_dataset(const std::string& path, const std::vector<QaRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += format_record(r);
    out += '\n';
  }
  write_file(path, out);
}

std::string serialize_encoder(const FisherEncoder& encoder) {
  ByteWriter w;
  write_encoder(w, encoder);
  return wrap_archive(kEncoderMagic, w.data());
}

FisherEncoder parse_encoder(std::string_view bytes) {
  std::size_t offset = 0;
  const auto payload = unwrap_archive(kEncoderMagic, bytes, offset);
  ByteReader r(payload, offset);
  FisherEncoder e = read_encoder(r);
  if (!r.at_end()) throw CorruptFile("trailing bytes in encoder payload", r.offset());
  return e;
}

void save_encoder(const std::string& path, const FisherEncoder& encoder) {
  write_file(path, serialize_encoder(encoder));
}

FisherEncoder load_encoder(const std::string& path) { return parse_encoder(read_file(path)); }

std::string serialize_model(const VqaModel& model, const FisherEncoder& encoder) {
  ByteWriter w;
  const ModelConfig& c = model.config;
  w.u64(static_cast<std::uint64_t>(c.embedding_dim));
  w.u64(static_cast<std::uint64_t>(c.hidden_size));
  w.u64(static_cast<std::uint64_t>(c.num_answers));
  w.u32(static_cast<std::uint32_t>(c.fusion.op));
  w.u64(static_cast<std::uint64_t>(c.fusion.mcb_dim));
  w.u64(c.fusion.mcb_seed);
  w.f64(c.dropout);
  w.u32(c.train_embeddings ? 1 : 0);
  w.u64(c.seed);
  write_strings(w, model.vocab.tokens());
  write_strings(w, model.answers.answers());
  // Flat parameter arrays in for_each_parameter order; shapes follow from the
  // config, the vocabularies and the image dimension written after them.
  for_each_parameter(model.params, [&](const char*, const auto& flat) {
    w.u64(static_cast<std::uint64_t>(flat.size()));
    for (Index i = 0; i < flat.size(); ++i) w.f64(flat(i));
  });
  w.u64(static_cast<std::uint64_t>(model.image_dim()));
  write_encoder(w, encoder);
  return wrap_archive(kModelMagic, w.data());
}

ModelArchive parse_model(std::string_view bytes) {
  std::size_t offset = 0;
  const auto payload = unwrap_archive(kModelMagic, bytes, offset);
  ByteReader r(payload, offset);

  ModelArchive archive;
  VqaModel& model = archive.model;
  ModelConfig& c = model.config;
  c.embedding_dim = static_cast<Index>(r.u64());
  c.hidden_size = static_cast<Index>(r.u64());
  c.num_answers = static_cast<Index>(r.u64());
  const std::uint32_t op = r.u32();
  if (op > static_cast<std::uint32_t>(FusionOp::kMcb)) throw CorruptFile("unknown fusion operator", r.offset());
  c.fusion.op = static_cast<FusionOp>(op);
  c.fusion.mcb_dim = static_cast<Index>(r.u64());
  c.fusion.mcb_seed = r.u64();
  c.dropout = r.f64();
  c.train_embeddings = r.u32() != 0;
  c.seed = r.u64();
  try {
    model.vocab = Vocabulary(read_strings(r));
    model.answers = AnswerVocabulary(read_strings(r));
  } catch (const InvalidValue& e) {
    throw CorruptFile(e.what(), r.offset());
  }

  std::vector<Vector> flats;
  for (int i = 0; i < 10; ++i) flats.push_back(r.vector());
  const Index image_dim = static_cast<Index>(r.u64());

  const Index m = c.hidden_size;
  const Index fusion_dim = make_fusion_layer(c.fusion, 2 * m).output_dim();
  const std::array<std::pair<Index, Index>, 10> shapes{{
      {model.vocab.size(), c.embedding_dim},
      {4 * m, c.embedding_dim}, {4 * m, m}, {4 * m, 1},
      {4 * m, c.embedding_dim}, {4 * m, m}, {4 * m, 1},
      {2 * m, image_dim},
      {fusion_dim, model.answers.size()},
      {model.answers.size(), 1},
  }};
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (flats[i].size() != shapes[i].first * shapes[i].second) {
      throw CorruptFile("parameter array " + std::to_string(i) + " has unexpected size", r.offset());
    }
  }
  auto as_matrix = [&](std::size_t i) {
    return Matrix(Eigen::Map<const Matrix>(flats[i].data(), shapes[i].first, shapes[i].second));
  };
  VqaParams& p = model.params;
  p.embedding.weights = as_matrix(0);
  p.forward.input_weights = as_matrix(1);
  p.forward.recurrent_weights = as_matrix(2);
  p.forward.bias = flats[3];
  p.backward.input_weights = as_matrix(4);
  p.backward.recurrent_weights = as_matrix(5);
  p.backward.bias = flats[6];
  p.visual = as_matrix(7);
  p.classifier = as_matrix(8);
  p.classifier_bias = flats[9];

  archive.encoder = read_encoder(r);
  if (!r.at_end()) throw CorruptFile("trailing bytes in model payload", r.offset());
  try {
    finalize_model(model);
  } catch (const Error& e) {
    throw CorruptFile(e.what(), r.offset());
  }
  return archive;
}

void save_model(const VqaModel& model, const FisherEncoder& encoder, const std::string& path) {
  write_file(path, serialize_model(model, encoder));
}

ModelArchive load_model(const std::string& path) { return parse_model(read_file(path)); }

}  // namespace vibik
