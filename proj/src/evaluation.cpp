#include "vibiknet/evaluation.hpp"

#include <algorithm>
#include <cstdio>

#include "json.hpp"

namespace vibik {

double vqa_accuracy(std::string_view predicted, const std::vector<std::string>& human_answers) {
  if (human_answers.size() != kHumanAnswers) {
    throw ValidationError("expected 10 human answers, got " + std::to_string(human_answers.size()), 0);
  }
  const std::string norm = normalize_answer(predicted);
  const auto matches = std::count_if(human_answers.begin(), human_answers.end(),
                                     [&](const std::string& a) { return normalize_answer(a) == norm; });
  return std::min(static_cast<double>(matches) / 3.0, 1.0);
}

AccuracyReport score_predictions(const std::vector<QaRecord>& records,
                                 const std::vector<std::string>& predictions) {
  if (records.size() != predictions.size()) {
    throw DimensionError("score_predictions: " + std::to_string(records.size()) + " records, " +
                         std::to_string(predictions.size()) + " predictions");
  }
  double sums[3] = {0.0, 0.0, 0.0};
  Index counts[3] = {0, 0, 0};
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto cat = static_cast<std::size_t>(records[i].answer_type);
    sums[cat] += vqa_accuracy(predictions[i], records[i].answers);
    ++counts[cat];
  }
  auto score = [](double sum, Index count) {
    return CategoryScore{count ? 100.0 * sum / static_cast<double>(count) : 0.0, count};
  };
  AccuracyReport r;
  r.yes_no = score(sums[0], counts[0]);
  r.number = score(sums[1], counts[1]);
  r.other = score(sums[2], counts[2]);
  r.all = score(sums[0] + sums[1] + sums[2], counts[0] + counts[1] + counts[2]);
  return r;
}

AccuracyReport evaluate_split(const VqaModel& model, const EmbeddingMap& embeddings,
                              const std::vector<QaRecord>& records) {
  std::vector<std::string> predictions;
  predictions.reserve(records.size());
  for (const auto& rec : records) {
    const auto it = embeddings.find(rec.image_id);
    if (it == embeddings.end()) throw MissingImage(rec.image_id);
    const auto tokens = model.vocab.encode(rec.tokens);
    predictions.push_back(predict_answer(model, it->second, tokens).answer);
  }
  return score_predictions(records, predictions);
}

std::string report_json(const AccuracyReport& report) {
  nlohmann::ordered_json j;
  auto cat = [](const CategoryScore& s) {
    nlohmann::ordered_json c;
    c["accuracy"] = s.accuracy;
    c["count"] = s.count;
    return c;
  };
  j["yes/no"] = cat(report.yes_no);
  j["number"] = cat(report.number);
  j["other"] = cat(report.other);
  j["all"] = cat(report.all);
  if (report.seconds_per_epoch) j["seconds_per_epoch"] = *report.seconds_per_epoch;
  return j.dump();
}

std::string report_table(const AccuracyReport& report) {
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof(buf), "%-8s %8s %8s %8s %8s\n", "", "Y/N", "Num.", "Other", "All");
  out += buf;
  std::snprintf(buf, sizeof(buf), "%-8s %8.1f %8.1f %8.1f %8.1f\n", "acc[%]", report.yes_no.accuracy,
                report.number.accuracy, report.other.accuracy, report.all.accuracy);
  out += buf;
  std::snprintf(buf, sizeof(buf), "%-8s %8ld %8ld %8ld %8ld\n", "count",
                static_cast<long>(report.yes_no.count), static_cast<long>(report.number.count),
                static_cast<long>(report.other.count), static_cast<long>(report.all.count));
  out += buf;
  if (report.seconds_per_epoch) {
    std::snprintf(buf, sizeof(buf), "%-8s %8.3f\n", "s/epoch", *report.seconds_per_epoch);
    out += buf;
  }
  return out;
}

}  // namespace vibik
