#pragma once

// Moderation metrics: token precision/recall/F1, span pass@n%, activator
// early-trigger success, threshold calibration and representation export.

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "activator.hpp"
#include "corpus.hpp"
#include "moderation.hpp"
#include "router.hpp"

namespace pguard {

struct PRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0;
};

inline double harmonic_f1(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

/// Token-level P/R/F1 with harmful as the positive class. When neither mask
/// has a positive, P = R = F1 = 1; a side with no positives otherwise scores 0
/// precision (no predictions) or 1 recall (nothing to find).
inline PRF prf_from_counts(std::size_t tp, std::size_t fp, std::size_t fn) {
  PRF m{0.0, 0.0, 0.0, tp, fp, fn};
  const bool pred_pos = tp + fp > 0;
  const bool gold_pos = tp + fn > 0;
  if (!pred_pos && !gold_pos) {
    m.precision = m.recall = m.f1 = 1.0;
    return m;
  }
  m.precision = pred_pos ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  m.recall = gold_pos ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 1.0;
  m.f1 = harmonic_f1(m.precision, m.recall);
  return m;
}

inline PRF token_prf(std::span<const int> pred, std::span<const int> gold) {
  if (pred.size() != gold.size())
    throw std::invalid_argument("token_prf: prediction has " + std::to_string(pred.size()) + " tokens, gold has " +
                                std::to_string(gold.size()));
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gold[i] != 0;
    tp += p && g;
    fp += p && !g;
    fn += !p && g;
  }
  return prf_from_counts(tp, fp, fn);
}

struct SpanResult {
  std::size_t span_id = 0;
  std::size_t length = 0;
  std::size_t redacted = 0;
  bool passed = false;
};

struct PassAtN {
  std::vector<SpanResult> spans;
  double pass_rate = 1.0;  // vacuously 1 with no spans
};

/// A span passes when at least n% of its tokens are redacted.
inline PassAtN pass_at_n(std::span<const int> redaction_mask, const std::vector<TokenSpanRef>& gold_spans, double n) {
  if (!(n > 0.0 && n <= 100.0)) throw std::invalid_argument("pass_at_n: n must lie in (0, 100]");
  PassAtN out;
  std::size_t passed = 0;
  for (std::size_t id = 0; id < gold_spans.size(); ++id) {
    const auto& sp = gold_spans[id];
    if (sp.length == 0 || sp.start + sp.length > redaction_mask.size())
      throw std::invalid_argument("pass_at_n: span " + std::to_string(id) + " is empty or out of bounds");
    SpanResult r{id, sp.length, 0, false};
    for (std::size_t k = sp.start; k < sp.start + sp.length; ++k) r.redacted += redaction_mask[k] != 0;
    r.passed = static_cast<double>(r.redacted) * 100.0 >= n * static_cast<double>(r.length);
    passed += r.passed;
    out.spans.push_back(r);
  }
  if (!gold_spans.empty()) out.pass_rate = static_cast<double>(passed) / static_cast<double>(gold_spans.size());
  return out;
}

/// Allowed trigger offsets inside a span: max(1, ceil(length / 10)).
inline std::size_t early_trigger_window(std::size_t length) { return std::max<std::size_t>(1, (length + 9) / 10); }

struct EarlyTrigger {
  std::vector<bool> success;
  double rate = 1.0;
};

/// Activator success per span: the first in-span step with s > τ must fall in
/// the first 10% of the span's tokens. `events[i]` must describe position i.
inline EarlyTrigger early_trigger(const std::vector<ModerationEvent>& events, const std::vector<TokenSpanRef>& gold_spans,
                                  double tau) {
  for (std::size_t i = 0; i < events.size(); ++i)
    if (events[i].step != i) throw std::invalid_argument("early_trigger: event " + std::to_string(i) + " is misaligned");
  EarlyTrigger out;
  std::size_t ok = 0;
  for (const auto& sp : gold_spans) {
    if (sp.length == 0 || sp.start + sp.length > events.size())
      throw std::invalid_argument("early_trigger: span outside the event log");
    bool hit = false;
    for (std::size_t off = 0; off < sp.length; ++off) {
      if (events[sp.start + off].s > tau) {
        hit = off < early_trigger_window(sp.length);
        break;
      }
    }
    out.success.push_back(hit);
    ok += hit;
  }
  if (!gold_spans.empty()) out.rate = static_cast<double>(ok) / static_cast<double>(gold_spans.size());
  return out;
}

/// Per-token scores of one sequence for threshold calibration.
struct ScoredSequence {
  std::vector<double> s;  // activator signal for each token's step
  std::vector<double> r;  // router score for each token
  std::vector<int> gold;
};

inline std::vector<int> redaction_mask(const ScoredSequence& seq, const Thresholds& th) {
  std::vector<int> m(seq.gold.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = seq.s[i] > th.tau && seq.r[i] > th.xi;
  return m;
}

struct CalibrationGrid {
  std::vector<double> taus;
  std::vector<double> xis;

  /// {0.05, 0.10, …, 0.95} on both axes.
  static CalibrationGrid standard() {
    CalibrationGrid g;
    for (int i = 1; i <= 19; ++i) g.taus.push_back(0.05 * i);
    g.xis = g.taus;
    return g;
  }
};

struct CalibrationResult {
  Thresholds best;
  double f1 = 0.0;
};

/// Exhaustive grid search for the token-F1 maximizing (τ, ξ). Ties go to the
/// smaller ξ, then the smaller τ.
inline CalibrationResult calibrate_thresholds(const std::vector<ScoredSequence>& data, CalibrationGrid grid) {
  if (grid.taus.empty() || grid.xis.empty()) throw std::invalid_argument("calibrate_thresholds: empty grid");
  if (data.empty()) throw std::invalid_argument("calibrate_thresholds: empty validation set");
  for (const auto& seq : data)
    if (seq.s.size() != seq.gold.size() || seq.r.size() != seq.gold.size())
      throw std::invalid_argument("calibrate_thresholds: score and label lengths differ");
  std::sort(grid.taus.begin(), grid.taus.end());
  std::sort(grid.xis.begin(), grid.xis.end());
  CalibrationResult best{{grid.taus.front(), grid.xis.front()}, -1.0};
  for (double xi : grid.xis) {
    for (double tau : grid.taus) {
      std::size_t tp = 0, fp = 0, fn = 0;
      for (const auto& seq : data) {
        for (std::size_t i = 0; i < seq.gold.size(); ++i) {
          const bool p = seq.s[i] > tau && seq.r[i] > xi;
          const bool g = seq.gold[i] != 0;
          tp += p && g;
          fp += p && !g;
          fn += !p && g;
        }
      }
      const double f1 = prf_from_counts(tp, fp, fn).f1;
      if (f1 > best.f1) best = {{tau, xi}, f1};
    }
  }
  return best;
}

struct MetricReport {
  PRF token;
  std::map<int, double> pass_rate;  // keyed by n (percent)
  std::optional<double> early_trigger_rate;
  std::size_t n_spans = 0;
  std::size_t n_tokens = 0;
};

inline nlohmann::json to_json(const MetricReport& m) {
  nlohmann::json j;
  j["precision"] = m.token.precision;
  j["recall"] = m.token.recall;
  j["f1"] = m.token.f1;
  j["counts"] = {{"tp", m.token.tp}, {"fp", m.token.fp}, {"fn", m.token.fn}};
  nlohmann::json pr = nlohmann::json::object();
  for (auto [n, r] : m.pass_rate) pr[std::to_string(n)] = r;
  j["pass_rate"] = pr;
  j["early_trigger_rate"] = m.early_trigger_rate ? nlohmann::json(*m.early_trigger_rate) : nlohmann::json(nullptr);
  j["n_spans"] = m.n_spans;
  j["n_tokens"] = m.n_tokens;
  return j;
}

/// Aggregates token P/R/F1 and per-n pass rates over sequences of
/// (prediction mask, gold IOB).
inline MetricReport build_report(const std::vector<std::vector<int>>& preds, const std::vector<std::vector<Iob>>& gold,
                                 const std::vector<int>& pass_ns) {
  if (preds.size() != gold.size()) throw std::invalid_argument("build_report: sequence count mismatch");
  MetricReport rep;
  std::size_t tp = 0, fp = 0, fn = 0;
  std::map<int, std::size_t> passed;
  for (std::size_t s = 0; s < preds.size(); ++s) {
    std::vector<int> g;
    for (auto t : gold[s]) g.push_back(t == Iob::O ? 0 : 1);
    const auto m = token_prf(preds[s], g);
    tp += m.tp;
    fp += m.fp;
    fn += m.fn;
    const auto spans = iob_spans(gold[s]);
    rep.n_spans += spans.size();
    rep.n_tokens += g.size();
    for (int n : pass_ns)
      for (const auto& r : pass_at_n(preds[s], spans, n).spans) passed[n] += r.passed;
  }
  rep.token = prf_from_counts(tp, fp, fn);
  for (int n : pass_ns)
    rep.pass_rate[n] = rep.n_spans ? static_cast<double>(passed[n]) / static_cast<double>(rep.n_spans) : 1.0;
  return rep;
}

/// Projects rows onto their top two principal components. Each component's
/// sign is fixed so its largest-magnitude loading is positive.
inline std::vector<std::pair<double, double>> pca2d(const std::vector<Vec>& rows) {
  if (rows.empty()) return {};
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto d = static_cast<Eigen::Index>(rows.front().dim());
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<Eigen::Index>(rows[i].dim()) != d) throw DimensionError("pca2d: rows differ in width");
    for (Eigen::Index c = 0; c < d; ++c) x(i, c) = rows[i][c];
  }
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(std::max<Eigen::Index>(1, n - 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  // Eigenvalues come back ascending.
  Eigen::MatrixXd comps(d, 2);
  comps.setZero();
  for (Eigen::Index k = 0; k < std::min<Eigen::Index>(2, d); ++k) {
    Eigen::VectorXd c = es.eigenvectors().col(d - 1 - k);
    Eigen::Index arg;
    c.cwiseAbs().maxCoeff(&arg);
    if (c(arg) < 0) c = -c;
    comps.col(k) = c;
  }
  const Eigen::MatrixXd proj = x * comps;
  std::vector<std::pair<double, double>> out;
  out.reserve(rows.size());
  for (Eigen::Index i = 0; i < n; ++i) out.emplace_back(proj(i, 0), proj(i, 1));
  return out;
}

enum class Projection { None, Pca2d };
enum class PcaSource { Router, Activator };

struct ExportSequence {
  std::vector<Vec> hidden;
  std::vector<int> labels;
};

/// Writes one JSON line per token: {seq, pos, label, act_feat, rtr_feat}
/// plus {x, y} with PCA-2D projection. act_feat concatenates ΔW_i·h over
/// activators; rtr_feat is the router's center encoding of the full window.
inline std::size_t export_representations(const std::vector<ExportSequence>& seqs, const ActivatorBank& bank,
                                          const RouterParams& router, const std::string& path, Projection projection,
                                          PcaSource source = PcaSource::Router) {
  struct Row {
    std::size_t seq, pos;
    int label;
    Vec act, rtr;
  };
  std::vector<Row> rows;
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    const auto& sq = seqs[s];
    if (sq.hidden.size() != sq.labels.size()) throw std::invalid_argument("export: labels and states differ in length");
    for (std::size_t j = 0; j < sq.hidden.size(); ++j) {
      Row r{s, j, sq.labels[j], Vec{}, Vec{}};
      for (const auto& a : bank.activators) {
        const Vec u = low_rank_delta(a, sq.hidden[j].span());
        r.act.data.insert(r.act.data.end(), u.data.begin(), u.data.end());
      }
      r.rtr = router_forward(router, window(sq.hidden, j, router.config.window)).center_encoding;
      rows.push_back(std::move(r));
    }
  }
  std::vector<std::pair<double, double>> xy;
  if (projection == Projection::Pca2d) {
    std::vector<Vec> feats;
    feats.reserve(rows.size());
    for (const auto& r : rows) feats.push_back(source == PcaSource::Router ? r.rtr : r.act);
    xy = pca2d(feats);
  }
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) throw std::runtime_error("cannot write export file '" + path + "'");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    nlohmann::json j{{"seq", r.seq}, {"pos", r.pos}, {"label", r.label}, {"act_feat", r.act.data}, {"rtr_feat", r.rtr.data}};
    if (projection == Projection::Pca2d) {
      j["x"] = xy[i].first;
      j["y"] = xy[i].second;
    }
    os << j.dump() << '\n';
  }
  if (!os) throw std::runtime_error("write failed for '" + path + "'");
  return rows.size();
}

}  // namespace pguard
