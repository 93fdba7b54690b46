#include <openssl/evp.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include <nlohmann/json.hpp>

#include "afnn/data.hpp"
#include "afnn/metrics.hpp"
#include "afnn/model.hpp"
#include "afnn/op_suite.hpp"
#include "afnn/report.hpp"
#include "afnn/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace afnn;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

// Thrown for invalid flag combinations detected after parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

// nlohmann objects are key-sorted, so compact dump() is canonical.
std::string config_hash(const json& j) { return sha256_hex(j.dump()); }

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw UsageError("cannot open " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out || !(out << text)) throw UsageError("cannot write " + p.string());
}

fs::path sibling(const fs::path& out, const std::string& suffix) {
  auto p = out;
  return p.replace_extension(suffix);
}

RunConfig load_run_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

json losses_json(const LossReport& r) {
  return {{"total", r.total}, {"seg", r.seg}, {"seg_od", r.seg_od}, {"seg_oc", r.seg_oc}, {"rec", r.rec}, {"cls", r.cls}};
}

json summary_json(const std::map<metrics::Structure, metrics::StructureSummary>& s) {
  json j = json::object();
  for (const auto& [st, sum] : s) {
    j[metrics::structure_name(st)] = {{"mean_dsc", sum.mean_dsc}, {"mean_hd", sum.mean_hd},
                                      {"mean_asd", sum.mean_asd}, {"count", sum.count},
                                      {"undefined", sum.undefined}};
  }
  return j;
}

/// Brings samples to a square side the model accepts.
std::vector<Sample> resize_all(const std::vector<Sample>& in, std::size_t size) {
  std::vector<Sample> out;
  out.reserve(in.size());
  for (const auto& s : in) {
    out.push_back(s.height() == size && s.width() == size ? s : crop_resize(s, std::min(s.height(), s.width()), size));
  }
  return out;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string out;
  int domains = 4;
  int per_domain = 64;
  std::size_t size = 64;
  std::uint64_t seed = 1;
};

int cmd_gen_data(const GenDataArgs& a) {
  if (a.domains < 1) throw UsageError("--domains must be >= 1");
  if (a.per_domain < 1) throw UsageError("--per-domain must be >= 1");
  std::size_t total = 0;
  for (int d = 0; d < a.domains; ++d) {
    const auto samples = generate_domain(preset_domain(d, a.seed), static_cast<std::size_t>(a.per_domain), a.size);
    const auto dir = fs::path(a.out) / ("domain_" + std::to_string(d));
    const auto tags = split_tags(samples.size(), 0.8, mix_seed(a.seed, 1000 + static_cast<std::uint64_t>(d)));
    const auto manifest = save_samples(samples, dir, "domain_" + std::to_string(d), tags);
    save_manifest(manifest, dir / "manifest.json");
    total += samples.size();
  }
  std::cout << "wrote " << a.domains << " domains, " << total << " samples to " << a.out << '\n';
  return 0;
}

struct TrainArgs {
  std::string config, data, out;
  int unseen = -1;
};

int cmd_train(const TrainArgs& a) {
  auto run = load_run_config(a.config);
  run.unseen_domain = a.unseen;
  run.validate();
  const auto data = load_data_root(a.data, "train");
  const std::string hash = config_hash(to_json(run));
  std::cout << "config " << hash << ", " << data.size() << " samples, unseen domain " << run.unseen_domain << '\n';

  auto res = train(run, data);
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  save_checkpoint(res.params, a.out);
  std::ostringstream hist;
  write_history_csv(hist, res.history);
  write_file(sibling(a.out, ".history.csv"), hist.str());

  json s{{"seed", run.seed},
         {"config_hash", hash},
         {"config", to_json(run)},
         {"unseen_domain", run.unseen_domain},
         {"steps", res.steps},
         {"checkpoint_sha256", sha256_hex(checkpoint_bytes(res.params))}};
  s["initial_losses"] = res.initial ? losses_json(*res.initial) : json(nullptr);
  s["final_losses"] = res.history.empty() ? json(nullptr) : losses_json(res.history.back().loss);
  if (!res.history.empty()) {
    s["final_val_dsc"] = {{"OD", res.history.back().val_dsc_od}, {"OC", res.history.back().val_dsc_oc}};
  }
  write_file(sibling(a.out, ".summary.json"), s.dump(2) + "\n");
  if (!res.history.empty()) {
    const auto& h = res.history.back();
    std::cout << "final loss " << h.loss.total << " (seg " << h.loss.seg << "), val DSC OD " << h.val_dsc_od << " OC "
              << h.val_dsc_oc << '\n';
  }
  return 0;
}

struct EvalArgs {
  std::string ckpt, data, out, config, run_id, split = "test";
  int unseen = -1;
  double threshold = 0.5;
};

int cmd_eval(const EvalArgs& a) {
  auto params = load_checkpoint<float>(a.ckpt);
  const auto arch = architecture_of(params.config);
  // Without a classifier head the checkpoint does not record the domain count.
  std::optional<std::size_t> n_domains;
  if (arch.use_multitask) n_domains = arch.n_domains;
  std::optional<std::size_t> size;
  json jcfg = nullptr;
  std::string hash = config_hash(to_json(arch));
  double threshold = a.threshold;
  if (!a.config.empty()) {
    const auto run = load_run_config(a.config);
    if (to_json(architecture_of(run.model)) != to_json(arch)) {
      throw CheckpointError("checkpoint model " + to_json(arch).dump() + " does not match config model " +
                            to_json(architecture_of(run.model)).dump());
    }
    n_domains = run.model.n_domains;
    size = run.image_size;
    threshold = run.threshold;
    jcfg = to_json(run);
    jcfg["unseen_domain"] = a.unseen;
    hash = config_hash(jcfg);
  }
  if (a.unseen < 0 || (n_domains && static_cast<std::size_t>(a.unseen) >= *n_domains)) {
    throw UsageError("--unseen " + std::to_string(a.unseen) + " outside the model's " +
                     (n_domains ? std::to_string(*n_domains) : std::string("?")) + " domains");
  }
  std::vector<Sample> samples;
  for (auto& s : load_data_root(a.data, a.split == "all" ? std::nullopt : std::optional<std::string>(a.split))) {
    if (s.domain_id == a.unseen) samples.push_back(std::move(s));
  }
  if (samples.empty()) {
    throw UsageError("no '" + a.split + "' samples of domain " + std::to_string(a.unseen) + " under " + a.data);
  }
  if (size) samples = resize_all(samples, *size);

  const auto records = evaluate(params, samples, threshold);
  const std::string run_id = a.run_id.empty() ? fs::path(a.ckpt).stem().string() : a.run_id;
  std::ostringstream csv;
  metrics::write_metric_csv(csv, records, run_id, a.unseen);
  write_file(a.out, csv.str());
  const auto summary = metrics::summarize(records);
  json s{{"run_id", run_id},
         {"unseen_domain", a.unseen},
         {"split", a.split},
         {"threshold", threshold},
         {"samples", samples.size()},
         {"config_hash", hash},
         {"config", jcfg},
         {"checkpoint_sha256", sha256_hex(read_file(a.ckpt))},
         {"structures", summary_json(summary)}};
  write_file(sibling(a.out, ".summary.json"), s.dump(2) + "\n");
  for (const auto& [st, sum] : summary) {
    std::cout << metrics::structure_name(st) << ": DSC " << sum.mean_dsc << "  HD " << sum.mean_hd << "  ASD "
              << sum.mean_asd << "  (n=" << sum.count << ", undefined " << sum.undefined << ")\n";
  }
  return 0;
}

struct GradArgs {
  std::string ops = "all";
  std::size_t trials = 10;
  std::uint64_t seed = 1;
};

int cmd_gradcheck(const GradArgs& a) {
  auto cases = op_cases();
  if (a.ops != "all") {
    std::vector<GradCase> picked;
    for (auto& c : cases)
      if (c.name == a.ops) picked.push_back(c);
    if (picked.empty()) {
      std::string names;
      for (const auto& c : cases) names += " " + c.name;
      throw UsageError("unknown op '" + a.ops + "'; available:" + names);
    }
    cases = std::move(picked);
  }
  if (a.trials < 1) throw UsageError("--trials must be >= 1");
  bool ok = true;
  std::printf("%-20s %6s %12s %10s %s\n", "op", "trials", "max_rel_err", "tol", "result");
  for (const auto& r : run_grad_suite(cases, a.trials, a.seed)) {
    std::printf("%-20s %6zu %12.3e %10.1e %s\n", r.name.c_str(), r.trials, r.max_rel_error, r.tol,
                r.passed ? "PASS" : "FAIL");
    ok = ok && r.passed;
  }
  if (!ok) {
    std::cerr << "gradcheck: at least one op exceeded its tolerance\n";
    return kExitNumerical;
  }
  return 0;
}

struct GapArgs {
  std::string data, ckpt, out, split = "all", mode = "train";
  std::uint64_t seed = 1;
  bool svg = false;
};

int cmd_gap_stats(const GapArgs& a) {
  const auto samples =
      load_data_root(a.data, a.split == "all" ? std::nullopt : std::optional<std::string>(a.split));
  if (samples.empty()) throw UsageError("no samples under " + a.data);
  std::map<int, std::vector<Tensor<float>>> groups;
  for (const auto& s : samples) groups[s.domain_id].push_back(s.image);

  ModelConfig fresh;
  auto params = a.ckpt.empty() ? init_params<float>(fresh, a.seed) : load_checkpoint<float>(a.ckpt);
  if (a.mode != "train" && a.mode != "eval") throw UsageError("--mode must be train or eval");
  const Mode mode = a.mode == "train" ? Mode::kTrain : Mode::kEval;
  // The whole set goes through the adaptor as one batch (domain order).
  auto transform = [&](const std::vector<Tensor<float>>& imgs) {
    std::vector<std::size_t> idx;
    std::vector<Sample> ordered;
    for (const auto& [d, list] : groups)
      for (const auto& s : samples)
        if (s.domain_id == d) ordered.push_back(s);
    for (std::size_t i = 0; i < ordered.size(); ++i) idx.push_back(i);
    const auto batch = make_batch<float>(ordered, idx);
    Tape<float> tape;
    Net<float> net(params, tape, mode);
    const auto y = adaptor_forward(net, tape.constant(batch.images)).value();
    std::vector<Tensor<float>> out;
    const std::size_t per = y.size() / imgs.size();
    for (std::size_t i = 0; i < imgs.size(); ++i) {
      Tensor<float> t({y.dim(1), y.dim(2), y.dim(3)});
      std::copy_n(y.data().begin() + static_cast<std::ptrdiff_t>(i * per), per, t.data().begin());
      out.push_back(std::move(t));
    }
    return out;
  };
  const auto rep = metrics::domain_gap_stats<float>(groups, transform);
  const double ratio = rep.raw.gap > 0 ? rep.adapted->gap / rep.raw.gap : 0.0;
  std::cout << std::setprecision(9) << "raw_gap " << rep.raw.gap << "\nadapted_gap " << rep.adapted->gap
            << "\nratio " << ratio << '\n';

  if (!a.out.empty()) {
    const fs::path dir(a.out);
    json j{{"raw_gap", rep.raw.gap},
           {"adapted_gap", rep.adapted->gap},
           {"ratio", ratio},
           {"mode", a.mode},
           {"adaptor", a.ckpt.empty() ? json("fresh, seed " + std::to_string(a.seed)) : json(a.ckpt)},
           {"config_hash", config_hash(to_json(params.config))}};
    std::ostringstream csv;
    csv << "side,domain,channel,bin,lo,hi,count\n" << std::setprecision(9);
    auto dump_side = [&](const char* side, const metrics::GapSide& g) {
      json doms = json::array();
      for (const auto& d : g.domains) {
        doms.push_back({{"domain", d.domain_id}, {"mean_intensity", d.mean_intensity}});
        for (std::size_t c = 0; c < d.channels.size(); ++c) {
          const auto& ch = d.channels[c];
          doms.back()["channels"].push_back({{"mean", ch.mean}, {"std", ch.std}});
          const double w = (ch.hi - ch.lo) / static_cast<double>(ch.histogram.size());
          for (std::size_t b = 0; b < ch.histogram.size(); ++b) {
            csv << side << ',' << d.domain_id << ',' << c << ',' << b << ',' << ch.lo + w * static_cast<double>(b)
                << ',' << ch.lo + w * static_cast<double>(b + 1) << ',' << ch.histogram[b] << '\n';
          }
          if (a.svg) {
            write_file(dir / (std::string(side) + "_domain" + std::to_string(d.domain_id) + "_ch" + std::to_string(c) +
                              ".svg"),
                       report::histogram_svg(ch.histogram, ch.lo, ch.hi,
                                             std::string(side) + " domain " + std::to_string(d.domain_id) +
                                                 " channel " + std::to_string(c)));
          }
        }
      }
      j[side] = doms;
    };
    dump_side("raw", rep.raw);
    dump_side("adapted", *rep.adapted);
    write_file(dir / "gap_histograms.csv", csv.str());
    write_file(dir / "gap_summary.json", j.dump(2) + "\n");
  }
  return 0;
}

struct ReportArgs {
  std::vector<std::string> in;
  std::string out;
};

int cmd_report(const ReportArgs& a) {
  std::vector<report::CsvRow> rows;
  for (const auto& p : a.in) {
    std::ifstream f(p);
    if (!f) throw UsageError("cannot open " + p);
    auto r = report::read_metric_csv(f, p);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  if (rows.empty()) throw UsageError("no metric rows in the inputs");
  write_file(a.out, report::render_report(report::build_table(rows)));
  std::cout << "wrote " << a.out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AFNN optic disc/cup segmentation toolkit"};
  app.require_subcommand(1);
  app.allow_extras(false);

  GenDataArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "Generate the synthetic multi-domain dataset");
  c_gen->add_option("--out", gen.out, "Output directory")->required();
  c_gen->add_option("--domains", gen.domains, "Number of domains")->capture_default_str();
  c_gen->add_option("--per-domain", gen.per_domain, "Samples per domain")->capture_default_str();
  c_gen->add_option("--size", gen.size, "Image side in pixels")->capture_default_str();
  c_gen->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Two-stage training on all but the unseen domain");
  c_train->add_option("--config", tr.config, "Run configuration JSON")->required()->check(CLI::ExistingFile);
  c_train->add_option("--data", tr.data, "Data root (gen-data output)")->required();
  c_train->add_option("--unseen", tr.unseen, "Held-out domain id")->required();
  c_train->add_option("--out", tr.out, "Checkpoint path")->required();

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Score a checkpoint on one domain");
  c_eval->add_option("--ckpt", ev.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--data", ev.data, "Data root")->required();
  c_eval->add_option("--unseen", ev.unseen, "Domain to evaluate")->required();
  c_eval->add_option("--out", ev.out, "Metrics CSV path")->required();
  c_eval->add_option("--config", ev.config, "Run configuration to check against the checkpoint")
      ->check(CLI::ExistingFile);
  c_eval->add_option("--run-id", ev.run_id, "Row label in the CSV (default: checkpoint stem)");
  c_eval->add_option("--split", ev.split, "train, test or all")
      ->check(CLI::IsMember({"train", "test", "all"}))
      ->capture_default_str();
  c_eval->add_option("--threshold", ev.threshold, "Probability threshold (overridden by --config)")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();

  GradArgs gr;
  auto* c_grad = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  c_grad->add_option("--ops", gr.ops, "'all' or one op name")->capture_default_str();
  c_grad->add_option("--trials", gr.trials, "Random trials per op")->capture_default_str();
  c_grad->add_option("--seed", gr.seed, "Seed")->capture_default_str();

  GapArgs gp;
  auto* c_gap = app.add_subcommand("gap-stats", "Domain gap before and after the adaptor");
  c_gap->add_option("--data", gp.data, "Data root")->required();
  c_gap->add_option("--ckpt", gp.ckpt, "Checkpoint (default: freshly initialized adaptor)")
      ->check(CLI::ExistingFile);
  c_gap->add_option("--out", gp.out, "Directory for histogram CSV, summary JSON and SVGs");
  c_gap->add_option("--split", gp.split, "train, test or all")
      ->check(CLI::IsMember({"train", "test", "all"}))
      ->capture_default_str();
  c_gap->add_option("--mode", gp.mode, "Normalization mode: train or eval")
      ->check(CLI::IsMember({"train", "eval"}))
      ->capture_default_str();
  c_gap->add_option("--seed", gp.seed, "Seed of the fresh adaptor")->capture_default_str();
  c_gap->add_flag("--svg", gp.svg, "Also write per-domain histogram SVGs (needs --out)");

  ReportArgs rp;
  auto* c_rep = app.add_subcommand("report", "Markdown tables from metric CSVs");
  c_rep->add_option("--in", rp.in, "Metric CSVs")->required()->check(CLI::ExistingFile);
  c_rep->add_option("--out", rp.out, "Markdown output path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*c_gen) return cmd_gen_data(gen);
    if (*c_train) return cmd_train(tr);
    if (*c_eval) return cmd_eval(ev);
    if (*c_grad) return cmd_gradcheck(gr);
    if (*c_gap) {
      if (gp.svg && gp.out.empty()) throw UsageError("--svg needs --out");
      return cmd_gap_stats(gp);
    }
    if (*c_rep) return cmd_report(rp);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}
