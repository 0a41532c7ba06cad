#include "dw0/latency.hpp"

#include <Eigen/QR>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <algorithm>
#include <chrono>

namespace dw0 {

LinearFit fit_line(const std::vector<std::pair<double, double>>& xy) {
  if (xy.size() < 2) throw std::invalid_argument("fit_line needs two points");
  Eigen::MatrixXd a(static_cast<Eigen::Index>(xy.size()), 2);
  Eigen::VectorXd y(static_cast<Eigen::Index>(xy.size()));
  for (std::size_t i = 0; i < xy.size(); ++i) {
    a(static_cast<Eigen::Index>(i), 0) = xy[i].first;
    a(static_cast<Eigen::Index>(i), 1) = 1.0;
    y(static_cast<Eigen::Index>(i)) = xy[i].second;
  }
  const Eigen::Vector2d c = a.colPivHouseholderQr().solve(y);
  const double ss_res = (a * c - y).squaredNorm();
  const double ss_tot = (y.array() - y.mean()).square().sum();
  return {c(0), c(1), ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0};
}

double median_ms(const std::function<void()>& fn, int repeats, int warmup) {
  for (int i = 0; i < warmup; ++i) fn();
  std::vector<double> t;
  for (int i = 0; i < std::max(1, repeats); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    t.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(t.begin(), t.end());
  const auto n = t.size();
  return n % 2 ? t[n / 2] : 0.5 * (t[n / 2 - 1] + t[n / 2]);
}

std::vector<double> interleaved_median_ms(const std::vector<std::function<void()>>& fns, int repeats, int warmup) {
  for (int i = 0; i < warmup; ++i)
    for (const auto& fn : fns) fn();
  std::vector<std::vector<double>> t(fns.size());
  for (int i = 0; i < std::max(1, repeats); ++i)
    for (std::size_t j = 0; j < fns.size(); ++j) {
      const auto t0 = std::chrono::steady_clock::now();
      fns[j]();
      t[j].push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
  std::vector<double> out;
  for (auto& v : t) {
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    out.push_back(n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]));
  }
  return out;
}

template <typename Scalar>
LatencyReport measure_latency(const BackboneConfig& bcfg, ExpertConfig ecfg, ParamSet<Scalar>& params,
                              const TokenSequence& seq, FrontEnd fe, const LatencyOptions& o) {
#if defined(__GLIBC__)
  // keep freed tape memory in the heap, otherwise page faults show up once a decode crosses the trim threshold
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_MMAP_THRESHOLD, 1 << 25);
  mallopt(M_TOP_PAD, 1 << 28);
#endif
  const Backbone<Scalar> bb(bcfg);
  ecfg.backbone_sees_expert = false;
  ecfg.kind = DecoderKind::Query;
  const ActionExpert<Scalar> query(bb, ecfg);
  if (!params.contains(std::string(ActionExpert<Scalar>::kPrefix) + "tok_emb")) {
    Rng rng(0);
    query.init(params, rng);
  }
  ecfg.kind = DecoderKind::Autoregressive;
  const ActionExpert<Scalar> ar(bb, ecfg);
  ecfg.kind = DecoderKind::Flow;
  const ActionExpert<Scalar> flow(bb, ecfg);

  const std::vector<const TokenSequence*> sp{&seq};
  const auto ctx = make_batch(sp, fe, seq.context_length);
  auto with_session = [&](const ActionExpert<Scalar>& ex, auto&& body) {
    Tape<Scalar> tape;
    tape.set_grad_enabled(false);
    ExpertSession<Scalar> s(ex, params, tape, ctx);
    body(s);
  };

  LatencyReport r;
  r.full_backbone_ms = median_ms([&] { generate_action_tokens(bb, params, seq, fe); }, o.repeats, o.warmup);
  r.expert_query_ms =
      median_ms([&] { with_session(query, [&](auto& s) { query_decode(query, s, sp); }); }, o.repeats, o.warmup);
  r.expert_flow_ms =
      median_ms([&] { with_session(flow, [&](auto& s) { flow_sample(flow, s, sp, 0); }); }, o.repeats, o.warmup);
  r.expert_ar_ms = median_ms([&] { with_session(ar, [&](auto& s) { ar_expert_decode(ar, s, sp); }); }, o.repeats,
                             o.warmup);
  std::vector<std::function<void()>> by_length;
  for (int L : o.ar_lengths)
    by_length.emplace_back([&, L] { with_session(ar, [&](auto& s) { ar_expert_decode(ar, s, sp, DecodeOptions{}, L); }); });
  const auto ms = interleaved_median_ms(by_length, o.ar_repeats, o.warmup);
  std::vector<std::pair<double, double>> pts;
  for (std::size_t i = 0; i < ms.size(); ++i) {
    r.ar_by_length.emplace_back(o.ar_lengths[i], ms[i]);
    pts.emplace_back(o.ar_lengths[i], ms[i]);
  }
  if (pts.size() >= 2) {
    const auto f = fit_line(pts);
    r.ar_slope_ms = f.slope;
    r.ar_intercept_ms = f.intercept;
    r.ar_r2 = f.r2;
  }
  return r;
}

template LatencyReport measure_latency(const BackboneConfig&, ExpertConfig, ParamSet<float>&, const TokenSequence&,
                                       FrontEnd, const LatencyOptions&);
template LatencyReport measure_latency(const BackboneConfig&, ExpertConfig, ParamSet<double>&, const TokenSequence&,
                                       FrontEnd, const LatencyOptions&);

}  // namespace dw0
