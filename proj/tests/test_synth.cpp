#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "vibiknet/evaluation.hpp"
#include "vibiknet/synth.hpp"
#include "vibiknet/training.hpp"

using namespace vibik;

namespace {

std::filesystem::path temp_dir() {
  const auto dir = std::filesystem::temp_directory_path() / "vibiknet_synth_test";
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Synth, BookkeepingCounts) {
  SynthSpec spec;
  spec.images = 4;
  spec.regions = 3;
  spec.dim = 8;
  spec.questions_per_image = 2;
  spec.vocab_size = 20;
  spec.answers = 4;
  const auto corpus = synth_generate(1, spec);
  const auto dir = temp_dir();
  synth_write(corpus, (dir / "d.bin").string(), (dir / "q.jsonl").string());

  const auto desc = load_descriptors((dir / "d.bin").string());
  const auto records = load_dataset((dir / "q.jsonl").string());
  ASSERT_EQ(desc.size(), 4u);
  for (const auto& [id, set] : desc) {
    EXPECT_EQ(set.descriptors.rows(), 3);
    EXPECT_EQ(set.descriptors.cols(), 8);
  }
  ASSERT_EQ(records.size(), 8u);
  std::set<std::string> words, answers;
  for (const auto& r : records) {
    words.insert(r.tokens.begin(), r.tokens.end());
    answers.insert(r.answers.begin(), r.answers.end());
    EXPECT_EQ(r.answers.size(), 10u);
  }
  EXPECT_LE(words.size(), 20u);
  EXPECT_LE(answers.size(), 4u);
}

TEST(Synth, DefaultsAreLargeEnough) {
  const auto corpus = synth_generate(0, SynthSpec{});
  std::set<std::string> answers;
  std::size_t train = 0;
  for (const auto& r : corpus.records) {
    answers.insert(majority_answer(r));
    if (r.split == "train") ++train;
  }
  EXPECT_GE(train, 256u);
  EXPECT_EQ(answers.size(), 8u);
}

TEST(Synth, SameSeedByteIdenticalFiles) {
  const auto dir = temp_dir();
  synth_write(synth_generate(9, SynthSpec{}), (dir / "a.bin").string(), (dir / "a.jsonl").string());
  synth_write(synth_generate(9, SynthSpec{}), (dir / "b.bin").string(), (dir / "b.jsonl").string());
  EXPECT_EQ(read_file((dir / "a.bin").string()), read_file((dir / "b.bin").string()));
  EXPECT_EQ(read_file((dir / "a.jsonl").string()), read_file((dir / "b.jsonl").string()));
  synth_write(synth_generate(10, SynthSpec{}), (dir / "c.bin").string(), (dir / "c.jsonl").string());
  EXPECT_NE(read_file((dir / "a.jsonl").string()), read_file((dir / "c.jsonl").string()));
}

TEST(Synth, InvalidSpec) {
  SynthSpec spec;
  spec.images = 0;
  EXPECT_THROW(synth_generate(0, spec), InvalidValue);
  spec = SynthSpec{};
  spec.test_fraction = 1.0;
  EXPECT_THROW(synth_generate(0, spec), InvalidValue);
}

TEST(Synth, PlantedMappingIsLearnable) {
  const auto corpus = synth_generate(5, SynthSpec{});
  std::vector<RegionDescriptorSet> train_images;
  std::set<std::string> train_ids;
  std::vector<QaRecord> train_records, test_records;
  for (const auto& r : corpus.records) {
    (r.split == "train" ? train_records : test_records).push_back(r);
    if (r.split == "train") train_ids.insert(r.image_id);
  }
  for (const auto& set : corpus.descriptors)
    if (train_ids.count(set.image_id)) train_images.push_back(set);

  EncoderConfig ec;
  ec.pca_dim = 16;
  ec.components = 8;
  ec.embedding_dim = 32;
  ec.seed = 5;
  const auto encoder = fit_encoder(train_images, ec);
  EmbeddingMap embeddings;
  for (const auto& set : corpus.descriptors) embeddings[set.image_id] = encode_image(encoder, set);

  std::vector<std::vector<std::string>> texts;
  std::vector<std::string> majority;
  for (const auto& r : train_records) {
    texts.push_back(r.tokens);
    majority.push_back(majority_answer(r));
  }
  ModelConfig mc;
  mc.embedding_dim = 16;
  mc.hidden_size = 16;
  mc.num_answers = 8;
  mc.seed = 5;
  auto model = make_model(build_vocabulary(texts), build_answer_vocabulary(majority, 8),
                          encoder.embedding_dim(), mc);
  TrainConfig tc;
  tc.epochs = 40;
  tc.batch_size = 32;
  tc.learning_rate = 0.005;
  tc.dropout = 0.2;
  tc.seed = 5;
  train(model, train_records, embeddings, tc);
  const auto report = evaluate_split(model, embeddings, test_records);
  EXPECT_GE(report.all.accuracy, 3.0 * 100.0 / 8.0);
}
