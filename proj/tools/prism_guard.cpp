// prism_guard: corpus generation, staged training, streaming moderation and
// evaluation from the command line.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "prism_guard/prism_guard.hpp"

namespace {

enum Exit : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string corpus;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--config", config, "Flat dotted-key JSON config (default: $PRISM_GUARD_CONFIG)");
    cmd->add_option("--seed", seed, "Root seed");
    cmd->add_option("--out-dir", out_dir, "Checkpoint and report directory");
    cmd->add_option("--corpus", corpus, "Corpus JSONL path");
  }

  pguard::RunConfig resolve() const {
    auto cfg = pguard::RunConfig::resolve(config);
    if (seed) cfg.seed = *seed;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (!corpus.empty()) cfg.corpus_path = corpus;
    return cfg;
  }
};

void print_losses(const pguard::TrainSummary& s) {
  std::cout << "checkpoint: " << s.checkpoint.string() << '\n';
  for (const auto& [name, v] : s.final_losses) std::cout << name << ": " << v << '\n';
}

void print_report(const nlohmann::json& rep) {
  const auto& th = rep.at("thresholds");
  std::cout << "tau: " << th.at("tau").get<double>() << "  xi: " << th.at("xi").get<double>()
            << (th.at("calibrated").get<bool>() ? " (calibrated)" : "") << '\n';
  for (const char* part : {"engine", "router"}) {
    const auto& m = rep.at(part);
    std::cout << part << ": P=" << m.at("precision").get<double>() << " R=" << m.at("recall").get<double>()
              << " F1=" << m.at("f1").get<double>();
    for (const auto& [n, r] : m.at("pass_rate").items()) std::cout << " pass@" << n << "=" << r.get<double>();
    std::cout << '\n';
  }
  std::cout << "activator: early_trigger=" << rep.at("activator").at("early_trigger_rate").get<double>()
            << " doc_accuracy=" << rep.at("activator").at("document_accuracy").get<double>() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Token-level safe generation: activators, router and streaming redaction"};
  app.require_subcommand(1);

  Common gen_c, train_c, mod_c, eval_c;

  auto* gen = app.add_subcommand("gen-corpus", "Generate a seeded synthetic annotated corpus");
  gen_c.add_to(gen);
  std::optional<std::size_t> n_docs;
  std::optional<double> density;
  std::string gen_out;
  gen->add_option("--n", n_docs, "Number of documents");
  gen->add_option("--density", density, "Share of documents carrying harmful spans");
  gen->add_option("--out", gen_out, "Output corpus path");

  auto* train = app.add_subcommand("train", "Train one stage: lm, activator or router");
  train_c.add_to(train);
  std::string stage;
  train->add_option("--stage", stage, "lm | activator | router")->required()->check(
      CLI::IsMember({"lm", "activator", "router"}));

  auto* mod = app.add_subcommand("moderate", "Generate from a prompt with streaming redaction");
  mod_c.add_to(mod);
  std::string prompt, events_out;
  std::optional<double> tau, xi;
  std::optional<std::size_t> max_new;
  bool collapse = false;
  mod->add_option("--prompt", prompt, "Prompt text")->required();
  mod->add_option("--tau", tau, "Activation threshold");
  mod->add_option("--xi", xi, "Router threshold");
  mod->add_option("--max-new-tokens", max_new, "Generation budget");
  mod->add_flag("--collapse-spans", collapse, "Print a run of redacted tokens as one marker");
  mod->add_option("--events-out", events_out, "Write per-step events as JSON lines");

  auto* ev = app.add_subcommand("eval", "Evaluate on the test split and write a metric report");
  eval_c.add_to(ev);
  std::vector<int> pass_at;
  bool calibrate = false;
  std::string export_reps = "none", pca_source = "router", report_path, export_path;
  std::optional<double> ev_tau, ev_xi;
  ev->add_option("--pass-at", pass_at, "Span pass threshold in percent (repeatable)")->check(CLI::Range(1, 100));
  ev->add_flag("--calibrate", calibrate, "Grid-search (tau, xi) on the training split");
  ev->add_option("--tau", ev_tau, "Activation threshold");
  ev->add_option("--xi", ev_xi, "Router threshold");
  ev->add_option("--export-reps", export_reps, "none | pca2d")->check(CLI::IsMember({"none", "pca2d"}));
  ev->add_option("--pca-source", pca_source, "router | activator")->check(CLI::IsMember({"router", "activator"}));
  ev->add_option("--report", report_path, "Report path (default: <out-dir>/report.json)");
  ev->add_option("--export-out", export_path, "Export path (default: reps.jsonl beside the report)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (gen->parsed()) {
      auto cfg = gen_c.resolve();
      if (n_docs) cfg.corpus.n_docs = *n_docs;
      if (density) cfg.corpus.span_density = *density;
      if (!gen_out.empty()) cfg.corpus_path = gen_out;
      cfg.require_seed();
      cfg.validate();
      const auto s = pguard::cmd_gen_corpus(cfg);
      std::cout << "documents: " << s.n_docs << "\nspans: " << s.n_spans << "\ntest documents: " << s.n_test
                << "\nwrote: " << cfg.corpus_path << '\n';
    } else if (train->parsed()) {
      auto cfg = train_c.resolve();
      cfg.require_seed();
      print_losses(pguard::cmd_train(cfg, pguard::stage_from_string(stage)));
    } else if (mod->parsed()) {
      auto cfg = mod_c.resolve();
      if (tau) cfg.thresholds.tau = *tau;
      if (xi) cfg.thresholds.xi = *xi;
      if (max_new) cfg.max_new_tokens = *max_new;
      cfg.require_seed();
      std::cout << pguard::cmd_moderate(cfg, prompt, collapse, events_out).text << '\n';
    } else if (ev->parsed()) {
      auto cfg = eval_c.resolve();
      if (ev_tau) cfg.thresholds.tau = *ev_tau;
      if (ev_xi) cfg.thresholds.xi = *ev_xi;
      cfg.require_seed();
      pguard::EvalOptions opt;
      if (!pass_at.empty()) opt.pass_at = pass_at;
      opt.calibrate = calibrate;
      opt.export_reps = export_reps == "pca2d" ? pguard::Projection::Pca2d : pguard::Projection::None;
      opt.pca_source = pca_source == "activator" ? pguard::PcaSource::Activator : pguard::PcaSource::Router;
      opt.report_path = report_path;
      opt.export_path = export_path;
      const auto res = pguard::cmd_eval(cfg, opt);
      print_report(res.report);
      std::cout << "report: " << res.report_path.string() << '\n';
      if (res.export_path) std::cout << "export: " << res.export_path->string() << '\n';
    }
  } catch (const pguard::UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const pguard::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kOk;
}
