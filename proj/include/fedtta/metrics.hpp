#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <fedtta/autodiff.hpp>

namespace fedtta {

// exact rational accuracy; the fraction is derived, never stored rounded
struct AccuracyCount {
  std::size_t correct = 0;
  std::size_t count = 0;
  double fraction() const {
    return count ? static_cast<double>(correct) / static_cast<double>(count) : 0.0;
  }
};

// argmax per row vs label; ties break to the lowest class index
inline AccuracyCount top1_accuracy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.shape()[0] == 0)
    throw TensorError("top1_accuracy: empty or non-matrix logits " + shape_string(logits.shape()));
  const std::size_t m = logits.shape()[0], c = logits.shape()[1];
  if (labels.size() != m)
    throw TensorError("top1_accuracy: " + std::to_string(labels.size()) + " labels for " +
                      std::to_string(m) + " rows");
  AccuracyCount acc{0, m};
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    if (static_cast<std::size_t>(labels[i]) == best) ++acc.correct;
  }
  return acc;
}

// mean over rows of the prediction entropy H(softmax(Z)), natural log
inline double mean_prediction_entropy(const Tensor& logits) {
  return mean(entropy(softmax(logits.detached()))).value();
}

// one row of the adaptation trace: what the personalized model looked like
// after `step` fine-tuning steps
struct AdaptStepTrace {
  int step = 0;
  std::optional<double> accuracy;  // present only when labels were provided for the curve
  double per_loss = 0.0;
  double mean_entropy = 0.0;
};

struct MismatchRow {
  int step;
  std::optional<double> accuracy;
  double per_loss;
  double entropy;
};

// lossless projection of the trace, one row per adaptation step
inline std::vector<MismatchRow> mismatch_curve(std::span<const AdaptStepTrace> trace) {
  std::vector<MismatchRow> rows;
  rows.reserve(trace.size());
  for (const auto& t : trace) rows.push_back({t.step, t.accuracy, t.per_loss, t.mean_entropy});
  return rows;
}

struct EvalRecord {
  int client_id = 0;
  std::string split;  // "validation" or "test"
  AccuracyCount accuracy;
  int round = 0;
  std::string method;
};

// unweighted mean of per-client accuracies
inline double mean_accuracy(std::span<const EvalRecord> records) {
  if (records.empty()) return 0.0;
  double total = 0.0;
  for (const auto& r : records) total += r.accuracy.fraction();
  return total / static_cast<double>(records.size());
}

}  // namespace fedtta
