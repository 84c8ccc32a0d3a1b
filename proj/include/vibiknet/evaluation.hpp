#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vibiknet/data_io.hpp"

namespace vibik {

/// min(#humans that gave `predicted` / 3, 1). Requires exactly ten answers.
double vqa_accuracy(std::string_view predicted, const std::vector<std::string>& human_answers);

struct CategoryScore {
  double accuracy = 0.0;  // percent
  Index count = 0;
};

struct AccuracyReport {
  CategoryScore yes_no;
  CategoryScore number;
  CategoryScore other;
  CategoryScore all;
  std::optional<double> seconds_per_epoch;
};

/// Scores one prediction per record.
AccuracyReport score_predictions(const std::vector<QaRecord>& records,
                                 const std::vector<std::string>& predictions);

/// Predicts every record with `model` and scores it.
AccuracyReport evaluate_split(const VqaModel& model, const EmbeddingMap& embeddings,
                              const std::vector<QaRecord>& records);

std::string report_json(const AccuracyReport& report);
/// Aligned "Y/N  Num.  Other  All" table, one decimal place.
std::string report_table(const AccuracyReport& report);

}  // namespace vibik
