#pragma once

// Wall-clock comparison of full-backbone action generation against the
// action-expert decoders.

#include "dw0/experts.hpp"

namespace dw0 {

struct LatencyOptions {
  int repeats = 20;
  int warmup = 5;
  std::vector<int> ar_lengths{2, 4, 6, 8, 10, 12};
  int ar_repeats = 60;  // per length, round-robin over lengths
};

struct LatencyReport {
  double full_backbone_ms = 0.0;  // 12 action tokens from the backbone
  double expert_query_ms = 0.0;
  double expert_ar_ms = 0.0;      // 12 tokens
  double expert_flow_ms = 0.0;
  std::vector<std::pair<int, double>> ar_by_length;  // (L, median ms)
  double ar_slope_ms = 0.0;
  double ar_intercept_ms = 0.0;
  double ar_r2 = 0.0;
};

struct LinearFit {
  double slope = 0.0, intercept = 0.0, r2 = 0.0;
};
LinearFit fit_line(const std::vector<std::pair<double, double>>& xy);

/// Median of repeated timings after warmup runs, in milliseconds.
double median_ms(const std::function<void()>& fn, int repeats, int warmup);

/// Medians of fns timed round-robin, so slow drift hits every entry alike.
std::vector<double> interleaved_median_ms(const std::vector<std::function<void()>>& fns, int repeats, int warmup);

/// Times one sequence. Expert parameters missing from `params` are initialized.
template <typename Scalar>
LatencyReport measure_latency(const BackboneConfig& backbone, ExpertConfig expert, ParamSet<Scalar>& params,
                              const TokenSequence& seq, FrontEnd front_end, const LatencyOptions& options);

}  // namespace dw0
