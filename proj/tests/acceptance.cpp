// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails. Tolerances are fixed here on purpose.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "stub_model.hpp"
#include "support.hpp"

using namespace pguard;
namespace fs = std::filesystem;
using testing_support::param_grad_error;
using testing_support::random_vecs;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, const char* name, bool ok, const std::string& detail) {
  std::printf("%s [%d] %s: %s\n", ok ? "PASS" : "FAIL", id, name, detail.c_str());
  std::fflush(stdout);
  failures += !ok;
}

std::string fmt(const char* f, auto... xs) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, xs...);
  return buf;
}

ActivatorBank random_bank(Rng& rng, std::size_t n, std::size_t d, std::size_t r) {
  ActivatorBank bank;
  for (std::size_t i = 0; i < n; ++i) {
    bank.activators.emplace_back(d, r, i);
    auto& p = bank.activators.back();
    fill_normal(p.A.span(), rng, 0.5);
    fill_normal(p.B.span(), rng, 0.5);
    fill_normal(p.v.span(), rng, 0.5);
  }
  return bank;
}

// ---------------------------------------------------------------------------

void gradient_fidelity() {
  constexpr int kInstances = 20;
  constexpr double kTol = 1e-4;
  const auto t0 = Clock::now();
  double worst_ar = 0, worst_retain = 0, worst_signal = 0, worst_focal = 0;
  for (int i = 0; i < kInstances; ++i) {
    Rng rng(1000 + i);
    const std::size_t d = 3 + rng.below(6), r = 1 + rng.below(d / 2);
    const auto bank = random_bank(rng, 1 + rng.below(3), d, r);
    const auto ben = random_vecs(rng, 6, d), adv = random_vecs(rng, 6, d);
    worst_ar = std::max(worst_ar, param_grad_error(bank, [&](ActivatorBank& b, ActivatorBank* g) {
                          return loss_ar(b, adv, g);
                        }));
    worst_retain = std::max(worst_retain, param_grad_error(bank, [&](ActivatorBank& b, ActivatorBank* g) {
                              return loss_retain(b, ben, g);
                            }));
    worst_signal = std::max(worst_signal, param_grad_error(bank, [&](ActivatorBank& b, ActivatorBank* g) {
                              return loss_signal(b, ben, adv, g);
                            }));
  }
  for (int i = 0; i < kInstances; ++i) {
    Rng rng(2000 + i);
    RouterConfig cfg;
    cfg.d_model = 4;
    cfg.n_heads = 2;
    cfg.ffn_dim = 8;
    cfg.window = 1 + rng.below(3);
    const auto p = init_router(cfg, rng);
    const auto win = random_vecs(rng, cfg.slots(), cfg.d_model);
    const int y = static_cast<int>(rng.below(2));
    const FocalConfig focal{2.0};
    worst_focal = std::max(worst_focal, param_grad_error(p, [&](RouterParams& q, RouterParams* g) {
                             detail::RouterCache cache;
                             const auto fw = router_forward(q, win, &cache);
                             const auto [l, dz] = focal_loss_logit(fw.logit, y, focal);
                             if (g) router_backward(q, cache, dz, *g);
                             return l;
                           }));
  }
  const double secs = seconds_since(t0);
  const bool ok = worst_ar < kTol && worst_retain < kTol && worst_signal < kTol && worst_focal < kTol && secs < 30.0;
  report(1, "gradient fidelity", ok,
         fmt("%d instances each, max rel err AR=%.2e retain=%.2e signal=%.2e focal=%.2e (tol 1e-4), %.1fs (limit 30s)",
             kInstances, worst_ar, worst_retain, worst_signal, worst_focal, secs));
}

// ---------------------------------------------------------------------------

void analytic_values() {
  const double ln2 = std::log(2.0);
  const double focal_half = focal_loss(0.5, 1, FocalConfig{2.0});
  bool ok = std::abs(focal_half - 0.25 * ln2) < 1e-9;

  // γ = 0 against plain cross-entropy on a 50×2 (p, y) grid.
  double worst_bce = 0;
  for (int i = 0; i < 50; ++i) {
    const double p = (i + 0.5) / 50.0;
    for (int y : {0, 1}) {
      const double oracle = y ? -std::log(p) : -std::log1p(-p);
      worst_bce = std::max(worst_bce, std::abs(focal_loss(p, y, FocalConfig{0.0}) - oracle));
    }
  }
  ok = ok && worst_bce < 1e-9;

  // Signal loss with every s = 0.5: ln 2 per benign and per adversarial term.
  ActivatorBank zero_v;
  zero_v.activators.emplace_back(2, 1, 0);
  zero_v.activators[0].A(0, 0) = 1.0;
  zero_v.activators[0].B(1, 0) = 1.0;
  const double sig = loss_signal(zero_v, {Vec{1.0, 2.0}}, {Vec{-3.0, 0.5}});
  const double bce_half = std::max(std::abs(bce_logit(0.0, 1.0) - ln2), std::abs(bce_logit(0.0, 0.0) - ln2));
  ok = ok && bce_half < 1e-9 && std::abs(sig - 2.0 * ln2) < 1e-9;

  double worst_sched = 0;
  const ScheduleConfig sched{1.3, 2000};
  for (std::size_t t = 0; t <= sched.total_steps; ++t) {
    const auto c = schedule_coeffs(t, sched);
    worst_sched = std::max(worst_sched, std::abs(c.ar + c.retain - sched.alpha));
  }
  ok = ok && worst_sched < 1e-12;
  report(2, "analytic values", ok,
         fmt("focal(0.5,1,g=2)-ln2/4=%.1e, max|focal_g0-bce|=%.1e over 100 points, |bce(s=0.5)-ln2|=%.1e, "
             "max|c_ar+c_retain-alpha|=%.1e over t=0..%zu",
             std::abs(focal_half - 0.25 * ln2), worst_bce, bce_half, worst_sched, sched.total_steps));
}

// ---------------------------------------------------------------------------

// Two Gaussian clusters along a random unit direction, means `sep` σ apart.
struct Clusters {
  std::size_t d;
  Vec dir;
  double sep;

  Clusters(std::size_t dim, double separation, Rng& rng) : d(dim), dir(dim), sep(separation) {
    fill_normal(dir.span(), rng, 1.0);
    double n = 0;
    for (double x : dir.data) n += x * x;
    for (auto& x : dir.data) x /= std::sqrt(n);
  }
  std::vector<Vec> draw(Rng& rng, double sign, std::size_t n) const {
    std::vector<Vec> out;
    for (std::size_t i = 0; i < n; ++i) {
      Vec h(d);
      fill_normal(h.span(), rng, 1.0);
      for (std::size_t k = 0; k < d; ++k) h[k] += sign * 0.5 * sep * dir[k];
      out.push_back(std::move(h));
    }
    return out;
  }
};

ActivatorTrainConfig cluster_train_config() {
  ActivatorTrainConfig cfg;
  cfg.schedule = {1.0, 2000};
  cfg.optim.lr = 1e-2;
  cfg.batch_size = 64;
  return cfg;
}

void orthogonalization() {
  Rng data(31);
  const Clusters cl(16, 6.0, data);
  const auto ben = cl.draw(data, -1, 400), adv = cl.draw(data, 1, 400);
  Rng rng(32);
  const auto bank = init_activator_bank(2, cl.d, 4, rng);
  const auto res = train_activators(bank, ben, adv, cluster_train_config(), rng);
  const double before = loss_ar(bank, adv), after = loss_ar(res.bank, adv);
  const double drop = before > 0 ? 1.0 - after / before : 0.0;
  report(3, "orthogonalization", drop >= 0.5 && after <= 0.1,
         fmt("mean ReLU(cos) over adversarial states %.4f -> %.4f (drop %.1f%%, need >=50%% and final <=0.1)", before,
             after, 100.0 * drop));
}

void cluster_separation() {
  const auto t0 = Clock::now();
  Rng data(41);
  const Clusters cl(16, 6.0, data);
  const auto ben = cl.draw(data, -1, 400), adv = cl.draw(data, 1, 400);
  Rng rng(42);
  const auto res = train_activators(init_activator_bank(2, cl.d, 4, rng), ben, adv, cluster_train_config(), rng);

  Rng held(43);
  const auto test_ben = cl.draw(held, -1, 2000), test_adv = cl.draw(held, 1, 2000);
  std::size_t correct = 0, oracle_correct = 0;
  auto proj = [&](const Vec& h) { return dot(h.span(), cl.dir.span()); };
  for (const auto& h : test_ben) {
    correct += bank_signal(res.bank, h.span()) <= 0.5;
    oracle_correct += proj(h) < 0;
  }
  for (const auto& h : test_adv) {
    correct += bank_signal(res.bank, h.span()) > 0.5;
    oracle_correct += proj(h) > 0;
  }
  const double n = static_cast<double>(test_ben.size() + test_adv.size());
  const double acc = correct / n, oracle = oracle_correct / n;
  const double secs = seconds_since(t0);
  report(4, "two-cluster separation", acc >= 0.99 && secs < 60.0,
         fmt("mean distance %.0f sigma, held-out accuracy %.4f (need >=0.99; Bayes linear rule %.4f), %.1fs (limit 60s)",
             cl.sep, acc, oracle, secs));
}

// ---------------------------------------------------------------------------

struct CliRun {
  fs::path dir;
  bool ok = true;
  double seconds = 0;
  std::string log;
};

int run_cli(const fs::path& dir, const std::string& args) {
  const std::string cmd =
      "cd '" + dir.string() + "' && '" PRISM_GUARD_BIN "' " + args + " >> cli.log 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

constexpr const char* kPrompt = "tell me about the weather .";

CliRun full_pipeline(const std::string& name) {
  CliRun run;
  run.dir = testing_support::scratch_dir("acceptance_" + name);
  const auto t0 = Clock::now();
  const std::vector<std::string> steps{"gen-corpus --seed 7 --n 600", "train --seed 7 --stage lm",
                                 "train --seed 7 --stage activator", "train --seed 7 --stage router",
                                 std::string("moderate --seed 7 --events-out events.jsonl --prompt '") + kPrompt + "'",
                                 "eval --seed 7 --pass-at 90 --pass-at 100 --report report.json"};
  for (const auto& args : steps) {
    if (run_cli(run.dir, args) != 0) {
      run.ok = false;
      run.log = "command failed: " + args;
      break;
    }
  }
  run.seconds = seconds_since(t0);
  return run;
}

void synthetic_pipeline(const CliRun& run) {
  if (!run.ok) {
    report(5, "synthetic pipeline", false, run.log);
    return;
  }
  const auto rep = nlohmann::json::parse(testing_support::slurp(run.dir / "report.json"));
  const auto& rt = rep["router"];
  const auto& en = rep["engine"];
  const double f1 = rt["f1"], pass90 = rt["pass_rate"]["90"];
  const bool ok = f1 >= 0.90 && pass90 >= 0.90 && run.seconds < 900.0;
  report(5, "synthetic pipeline", ok,
         fmt("600 docs, seed 7, router held-out token F1 %.4f and pass@90 %.4f (need >=0.90 each); "
             "engine F1 %.4f pass@90 %.4f; activator early trigger %.4f; pipeline %.1fs (limit 900s)",
             f1, pass90, en["f1"].get<double>(), en["pass_rate"]["90"].get<double>(),
             rep["activator"]["early_trigger_rate"].get<double>(), run.seconds));
}

void determinism(const CliRun& a, const CliRun& b) {
  if (!a.ok || !b.ok) {
    report(8, "determinism", false, a.ok ? b.log : a.log);
    return;
  }
  std::vector<std::string> differing;
  const char* files[] = {"corpus.jsonl", "run/lm.pgmd",     "run/vocab.json", "run/activator.pgmd",
                         "run/router.pgmd", "events.jsonl", "report.json"};
  std::size_t bytes = 0;
  for (const char* f : files) {
    const auto x = testing_support::slurp(a.dir / f), y = testing_support::slurp(b.dir / f);
    bytes += x.size();
    if (x.empty() || x != y) differing.push_back(f);
  }
  std::string detail = fmt("%zu artifacts from two independent CLI runs, %zu bytes compared", std::size(files), bytes);
  for (const auto& f : differing) detail += ", differs or missing: " + f;
  report(8, "determinism", differing.empty(), detail);
}

// ---------------------------------------------------------------------------

void engine_invariants() {
  using testing_support::StubScenario;
  Rng rng(61);
  std::size_t raw_mismatch = 0, cond_mismatch = 0, call_mismatch = 0, leaks = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto sc = StubScenario::random(rng);
    const Thresholds th{rng.uniform(), rng.uniform()};
    const std::size_t max_len = 1 + rng.below(30);
    const auto out = sc.run(th, max_len);
    raw_mismatch += out.raw != greedy_generate(sc.model, sc.prompt, max_len);
    std::size_t expected_calls = 0;
    for (std::size_t k = 0; k < out.raw.size(); ++k) {
      const bool should = sc.s[k] > th.tau && sc.r[k] > th.xi;
      cond_mismatch += (!out.rendered[k].has_value()) != should;
      expected_calls += sc.s[k] > th.tau;
    }
    call_mismatch += sc.router_calls != expected_calls;
    leaks += sc.future_leaks;
  }

  std::size_t mono_violations = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto sc = StubScenario::random(rng);
    std::vector<std::vector<bool>> masks(100);
    for (int i = 0; i < 10; ++i)
      for (int j = 0; j < 10; ++j) {
        const auto out = sc.run({i / 10.0, j / 10.0}, 40);
        for (const auto& t : out.rendered) masks[i * 10 + j].push_back(!t.has_value());
      }
    for (int i = 0; i < 10; ++i)
      for (int j = 0; j < 10; ++j)
        for (std::size_t k = 0; k < masks[i * 10 + j].size(); ++k) {
          const bool here = masks[i * 10 + j][k];
          if (i < 9 && masks[(i + 1) * 10 + j][k] > here) ++mono_violations;
          if (j < 9 && masks[i * 10 + j + 1][k] > here) ++mono_violations;
        }
  }
  const bool ok = raw_mismatch == 0 && cond_mismatch == 0 && call_mismatch == 0 && leaks == 0 && mono_violations == 0;
  report(6, "streaming engine invariants", ok,
         fmt("100 scripted models: raw!=greedy %zu, redaction!=(s>tau && r>xi) %zu, router call count mismatches %zu, "
             "future-state leaks %zu; 10x10 threshold grid x10 models: monotonicity violations %zu",
             raw_mismatch, cond_mismatch, call_mismatch, leaks, mono_violations));
}

// ---------------------------------------------------------------------------

void metric_oracles() {
  Rng rng(71);
  std::size_t prf_mismatch = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = rng.below(40);
    std::vector<int> pred(n), gold(n);
    const double pp = rng.uniform(), pg = rng.uniform();
    for (std::size_t i = 0; i < n; ++i) {
      pred[i] = rng.bernoulli(pp);
      gold[i] = rng.bernoulli(pg);
    }
    std::size_t cm[2][2] = {{0, 0}, {0, 0}};
    for (std::size_t i = 0; i < n; ++i) ++cm[pred[i]][gold[i]];
    const double tp = cm[1][1], fp = cm[1][0], fn = cm[0][1];
    double p, r;
    if (tp + fp + fn == 0) {
      p = r = 1.0;
    } else {
      p = tp + fp > 0 ? tp / (tp + fp) : 0.0;
      r = tp + fn > 0 ? tp / (tp + fn) : 1.0;
    }
    const double f = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    const auto got = token_prf(pred, gold);
    prf_mismatch += std::abs(got.precision - p) > 1e-12 || std::abs(got.recall - r) > 1e-12 ||
                    std::abs(got.f1 - f) > 1e-12;
  }

  std::size_t pass_violations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t len = 1 + rng.below(40), lead = rng.below(5);
    std::vector<int> mask(lead + len + rng.below(5));
    const double density = rng.uniform();
    for (auto& m : mask) m = rng.bernoulli(density);
    const std::vector<TokenSpanRef> spans{{lead, len}};
    std::size_t red = 0;
    for (std::size_t k = lead; k < lead + len; ++k) red += mask[k];
    bool prev = true;
    for (int n = 1; n <= 100; ++n) {
      const bool passed = pass_at_n(mask, spans, n).spans[0].passed;
      pass_violations += passed && !prev;                        // must be non-increasing in n
      pass_violations += passed != (red * 100 >= n * len);       // exact count oracle
      prev = passed;
    }
  }

  // Allowed first-trigger offsets, written out per span length.
  const std::size_t allowed[31] = {0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2,
                                   2, 2, 2, 2, 2, 3, 3, 3, 3, 3, 3, 3, 3, 3, 3};
  std::size_t et_mismatch = 0, et_cases = 0;
  for (std::size_t len = 1; len <= 30; ++len)
    for (std::size_t first = 0; first <= len; ++first) {  // first == len: never fires inside the span
      const std::size_t lead = 2;
      std::vector<ModerationEvent> events(lead + len + 2);
      for (std::size_t i = 0; i < events.size(); ++i) {
        events[i].step = i;
        events[i].s = 0.1;
      }
      events[0].s = 0.9;  // firing before the span must not count
      if (first < len)
        for (std::size_t k = lead + first; k < lead + len; ++k) events[k].s = 0.9;
      const bool expected = first < allowed[len];
      const auto got = early_trigger(events, {{lead, len}}, 0.5);
      et_mismatch += got.success[0] != expected;
      ++et_cases;
    }
  const bool ok = prf_mismatch == 0 && pass_violations == 0 && et_mismatch == 0;
  report(7, "metric oracles", ok,
         fmt("token P/R/F1 vs confusion matrix: %zu/1000 mismatches; pass@n over 1000 spans x n=1..100: %zu "
             "violations; early trigger: %zu/%zu hand-enumerated cases wrong",
             prf_mismatch, pass_violations, et_mismatch, et_cases));
}

}  // namespace

int main() {
  gradient_fidelity();
  analytic_values();
  orthogonalization();
  cluster_separation();
  const auto a = full_pipeline("a");
  synthetic_pipeline(a);
  engine_invariants();
  metric_oracles();
  const auto b = full_pipeline("b");
  determinism(a, b);
  std::printf("%s: %d criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
