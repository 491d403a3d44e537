// logcomp command-line tool: train, evaluate, inspect filters, generate the
// synthetic lag task, compare variants and sweep L.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "logcomp/logcomp.hpp"

namespace fs = std::filesystem;
using namespace logcomp;

namespace {

std::mutex g_print;

void say(const std::string& line) {
  std::lock_guard lock(g_print);
  std::cout << line << '\n' << std::flush;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct Flags {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::optional<long long> seed;
  std::optional<double> k, c, tau_min;
  std::optional<int> L, m, M;
  std::optional<std::string> variant, source, tokenizer, train, valid, test;
};

void add_run_flags(CLI::App* app, Flags& f) {
  app->add_option("--config", f.config, "key = value config file ([section] headers allowed)")->check(CLI::ExistingFile);
  app->add_option("--set", f.sets, "override one config key, e.g. --set train.total_steps=500 (repeatable)");
  app->add_option("--out", f.out, "output directory");
  app->add_option("--seed", f.seed, "train.seed");
}

void add_filter_flags(CLI::App* app, Flags& f) {
  app->add_option("--k", f.k, "filter.k, filter sharpness");
  app->add_option("--c", f.c, "filter.c, geometric spacing of peak times");
  app->add_option("--tau-min", f.tau_min, "filter.tau_min, first peak time");
  app->add_option("--L", f.L, "model.L, number of filters / compressed slots");
  app->add_option("--M", f.M, "filter.M, truncation horizon (0 = ceil(tau_max))");
}

void add_model_flags(CLI::App* app, Flags& f) {
  app->add_option("--m", f.m, "model.m, uncompressed window length");
  app->add_option("--variant", f.variant, "model.variant: scale_invariant | delta_control");
}

void add_data_flags(CLI::App* app, Flags& f) {
  app->add_option("--source", f.source, "data.source: text | synthetic");
  app->add_option("--tokenizer", f.tokenizer, "data.tokenizer: byte | bpe");
  app->add_option("--train", f.train, "data.train, training text file");
  app->add_option("--valid", f.valid, "data.valid, validation text file");
  app->add_option("--test", f.test, "data.test, test text file");
}

/// Config file, then dedicated flags, then --set overrides.
KeyValueConfig resolve(const Flags& f, const std::map<std::string, std::string>& base = {}) {
  KeyValueConfig cfg;
  for (const auto& [k, v] : base) cfg.set(k, v);
  if (!f.config.empty()) cfg.merge_file(f.config);
  const auto put = [&](const char* key, const auto& opt) {
    if (!opt) return;
    if constexpr (std::is_same_v<std::decay_t<decltype(*opt)>, std::string>) {
      cfg.set(key, *opt);
    } else if constexpr (std::is_same_v<std::decay_t<decltype(*opt)>, double>) {
      cfg.set(key, format_double(*opt));
    } else {
      cfg.set(key, std::to_string(*opt));
    }
  };
  put("train.seed", f.seed);
  put("filter.k", f.k);
  put("filter.c", f.c);
  put("filter.tau_min", f.tau_min);
  put("model.L", f.L);
  put("filter.M", f.M);
  put("model.m", f.m);
  put("model.variant", f.variant);
  put("data.source", f.source);
  put("data.tokenizer", f.tokenizer);
  put("data.train", f.train);
  put("data.valid", f.valid);
  put("data.test", f.test);
  for (const auto& s : f.sets) cfg.apply_override(s);
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  out.flush();
  if (!out) throw IoError("write to " + path.string() + " failed");
}

/// Keys echoed into checkpoints besides the model and optimizer ones.
std::map<std::string, std::string> data_keys(const KeyValueConfig& cfg) {
  std::map<std::string, std::string> out;
  for (const auto& [k, v] : cfg.values()) {
    if (k.starts_with("data.") || k.starts_with("synthetic.") || k.starts_with("eval.")) out[k] = v;
  }
  return out;
}

struct RunSummary {
  double val_ce = 0;
  EvalReport report;
};

/// Trains one model into `dir` (config.ini, seed, metrics.jsonl, best.ckpt,
/// last.ckpt, valid_report.json) and scores the final parameters on the full
/// validation split.
RunSummary train_run(const KeyValueConfig& cfg, const Dataset& ds, const fs::path& dir, const std::string& tag,
                     const std::string& resume = {}) {
  const ModelConfig mc = model_config_from(cfg, ds.raw_vocab);
  const TrainConfig tc = train_config_from(cfg);
  require(ds.train.size() >= 2, "training split is empty (set data.train or data.source = synthetic)");
  require(ds.valid.size() >= 2, "validation split is empty (set data.valid)");
  fs::create_directories(dir);
  write_text(dir / "config.ini", cfg.dump());
  write_text(dir / "seed", std::to_string(tc.seed) + "\n");

  Model model(mc, tc.seed);
  Trainer trainer(model, ds.train, &ds.valid, tc, dir);
  trainer.set_header_extras(data_keys(cfg));
  if (!resume.empty()) {
    trainer.resume(read_checkpoint(resume));
    say(tag + "resumed at step " + std::to_string(trainer.step()));
  }
  say(tag + "params " + std::to_string(model.params().count()) + ", attention length " +
      std::to_string(mc.seq_len()) + ", history " + std::to_string(mc.history_length()) + " tokens");
  trainer.run([&](const StepRecord& r) {
    if (!r.val_loss) return;
    say(tag + "step " + std::to_string(r.step) + "  lr " + fmt("%.3g", r.lr) + "  train " +
        fmt("%.4f", r.train_loss) + "  val " + fmt("%.4f", *r.val_loss) + "  val_ppl " + fmt("%.3f", *r.val_ppl) +
        "  " + fmt("%.1fs", r.wall_time));
  });
  RunSummary s;
  s.report = evaluate(model, ds.valid);
  s.val_ce = s.report.mean_ce();
  write_text(dir / "valid_report.json", s.report.to_json().dump(2) + "\n");
  return s;
}

int cmd_train(const Flags& f, const std::string& resume) {
  require(!f.out.empty(), "train needs --out");
  const auto cfg = resolve(f);
  const auto ds = load_dataset(cfg);
  const auto s = train_run(cfg, ds, f.out, "", resume);
  std::cout << s.report.to_text();
  return 0;
}

int cmd_eval(const Flags& f, const std::string& checkpoint, const std::string& split_name) {
  const Checkpoint ckpt = read_checkpoint(checkpoint);
  std::map<std::string, std::string> base;
  for (const auto& [k, v] : ckpt.header) {
    if (k.starts_with("data.") || k.starts_with("synthetic.") || k.starts_with("eval.")) base[k] = v;
  }
  const auto cfg = resolve(f, base);
  const Model model = model_from_checkpoint(ckpt);
  const Split split = parse_split(split_name);
  const auto ds = load_dataset(cfg);
  require(ds.raw_vocab <= model.config().vocab_size, "tokenizer vocabulary exceeds the model's");
  const Corpus& corpus = ds.split(split);
  require(corpus.size() >= 2, "split '" + split_name + "' is empty (set data." + split_name + ")");
  std::vector<double> log_probs;
  EvalOptions opts;
  const bool dump = cfg.get_bool("eval.dump_log_probs");
  if (dump) opts.log_probs = &log_probs;
  const auto report = evaluate(model, corpus, opts);
  std::cout << "split         " << split_name << '\n' << report.to_text();
  if (!f.out.empty()) {
    fs::create_directories(f.out);
    auto j = report.to_json();
    j["split"] = split_name;
    j["checkpoint"] = checkpoint;
    write_text(fs::path(f.out) / ("report_" + split_name + ".json"), j.dump(2) + "\n");
    if (dump) {
      std::string lines;
      for (double lp : log_probs) lines += format_double(lp) + "\n";
      write_text(fs::path(f.out) / ("log_probs_" + split_name + ".txt"), lines);
    }
  }
  return 0;
}

int cmd_inspect(const Flags& f, bool normalize) {
  auto cfg = resolve(f);
  if (normalize) cfg.set("filter.normalize_rows", "true");
  const ModelConfig mc = model_config_from(cfg);
  require(mc.L >= 1, "inspect-filters needs L >= 1");
  const auto bank = FilterBank::build(mc.bank_config());
  if (f.out.empty()) {
    export_impulse_responses(bank, std::cout);
    return 0;
  }
  fs::path path = f.out;
  if (fs::is_directory(path) || !path.has_extension()) {
    fs::create_directories(path);
    path /= "filters.csv";
  }
  export_impulse_responses(bank, path);
  std::cout << "wrote " << path.string() << " (" << bank.size() << " filters, M=" << bank.horizon() << ")\n";
  std::cout << "filter  tau_star     argmax  cv\n";
  for (int i = 0; i < bank.size(); ++i) {
    const auto mom = row_moments(bank.row(i));
    char line[96];
    std::snprintf(line, sizeof line, "%6d  %10.3f  %6zu  %.4f\n", i, bank.taus()[i], argmax(bank.row(i)) + 1, mom.cv());
    std::cout << line;
  }
  return 0;
}

void write_ids(const fs::path& path, const Corpus& c) {
  std::string text;
  for (std::size_t i = 0; i < c.size(); ++i) {
    text += std::to_string(c.token_ids[i]);
    text += (i + 1) % 64 == 0 || i + 1 == c.size() ? '\n' : ' ';
  }
  write_text(path, text);
}

int cmd_gen_synthetic(const Flags& f) {
  require(!f.out.empty(), "gen-synthetic needs --out");
  auto cfg = resolve(f);
  cfg.set("data.source", "synthetic");
  const auto ds = load_dataset(cfg);
  fs::create_directories(f.out);
  write_ids(fs::path(f.out) / "train.ids", ds.train);
  write_ids(fs::path(f.out) / "valid.ids", ds.valid);
  write_ids(fs::path(f.out) / "test.ids", ds.test);
  const int V = checked_int(cfg, "synthetic.vocab");
  const nlohmann::json meta{{"lag", cfg.get_int("synthetic.lag")},
                            {"vocab", V},
                            {"copy_probability", kLagCopyProbability},
                            {"train_tokens", ds.train.size()},
                            {"valid_tokens", ds.valid.size()},
                            {"test_tokens", ds.test.size()},
                            {"seed", cfg.get_int("synthetic.seed")},
                            {"informed_entropy", lag_task_informed_entropy(V)},
                            {"floor_entropy", lag_task_floor_entropy(V)}};
  write_text(fs::path(f.out) / "synthetic.json", meta.dump(2) + "\n");
  write_text(fs::path(f.out) / "config.ini", cfg.dump());
  std::cout << meta.dump(2) << '\n';
  return 0;
}

std::vector<int> default_l_list() {
  std::vector<int> out;
  for (int L = 5; L <= 53; L += 4) out.push_back(L);
  return out;
}

int cmd_compare(const Flags& f, std::vector<int> l_list, int n_seeds) {
  require(!f.out.empty(), "compare needs --out");
  require(n_seeds >= 1, "--seeds must be >= 1");
  const auto base = resolve(f);
  const auto ds = load_dataset(base);
  if (l_list.empty()) l_list.push_back(checked_int(base, "model.L"));
  const auto seed0 = base.get_int("train.seed");
  Comparison cmp;
  for (int L : l_list) {
    for (int s = 0; s < n_seeds; ++s) {
      ComparisonRow row;
      row.L = L;
      row.seed = static_cast<std::uint64_t>(seed0 + s);
      for (const char* variant : {"scale_invariant", "delta_control"}) {
        auto cfg = base;
        cfg.set("model.L", std::to_string(L));
        cfg.set("model.variant", variant);
        cfg.set("train.seed", std::to_string(row.seed));
        const std::string name = "L" + std::to_string(L) + "_seed" + std::to_string(row.seed) + "_" + variant;
        const auto r = train_run(cfg, ds, fs::path(f.out) / name, "[" + name + "] ");
        (std::string(variant) == "scale_invariant" ? row.scale_invariant_ce : row.delta_control_ce) = r.val_ce;
      }
      say("L=" + std::to_string(L) + " seed=" + std::to_string(row.seed) + "  scale_invariant " +
          fmt("%.5f", row.scale_invariant_ce) + "  delta_control " + fmt("%.5f", row.delta_control_ce) +
          (row.compression_wins() ? "  compression wins" : "  control wins"));
      cmp.rows.push_back(row);
    }
  }
  std::ofstream csv(fs::path(f.out) / "comparison.csv");
  if (!csv) throw IoError("cannot write comparison.csv");
  cmp.write_csv(csv);
  write_text(fs::path(f.out) / "config.ini", base.dump());
  if (base.get("data.source") == "synthetic") {
    const int V = checked_int(base, "synthetic.vocab");
    say("analytic CE: informed " + fmt("%.5f", lag_task_informed_entropy(V)) + ", no lag information " +
        fmt("%.5f", lag_task_floor_entropy(V)));
  }
  say(std::string("compression below control on every run: ") + (cmp.compression_wins_all() ? "yes" : "no"));
  return 0;
}

int cmd_sweep(const Flags& f, std::vector<int> l_list, int jobs) {
  require(!f.out.empty(), "sweep needs --out");
  require(jobs >= 1, "--jobs must be >= 1");
  if (l_list.empty()) l_list = default_l_list();
  const auto base = resolve(f);
  const auto ds = load_dataset(base);
  for (int L : l_list) {
    auto cfg = base;
    cfg.set("model.L", std::to_string(L));
    model_config_from(cfg, ds.raw_vocab);  // reject bad entries before any run starts
  }
  std::vector<std::optional<RunSummary>> results(l_list.size());
  std::vector<std::exception_ptr> errors(l_list.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < l_list.size(); i = next++) {
      try {
        auto cfg = base;
        cfg.set("model.L", std::to_string(l_list[i]));
        const std::string name = "L" + std::to_string(l_list[i]);
        results[i] = train_run(cfg, ds, fs::path(f.out) / name, "[" + name + "] ");
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int j = 0; j < std::min<int>(jobs, static_cast<int>(l_list.size())); ++j) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::string csv = "L,val_ce,raw_ppl,per_word_ppl\n";
  for (std::size_t i = 0; i < l_list.size(); ++i) {
    const auto& r = results[i]->report;
    csv += std::to_string(l_list[i]) + "," + format_double(r.mean_ce()) + "," + format_double(r.raw_ppl) + "," +
           format_double(r.per_word_ppl) + "\n";
    say("L=" + std::to_string(l_list[i]) + "  val_ce " + fmt("%.5f", r.mean_ce()) + "  raw_ppl " +
        fmt("%.4f", r.raw_ppl) + "  per_word_ppl " + fmt("%.3f", r.per_word_ppl));
  }
  write_text(fs::path(f.out) / "sweep.csv", csv);
  write_text(fs::path(f.out) / "config.ini", base.dump());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"logcomp: scale-invariant log compression for transformer inputs"};
  app.require_subcommand(1);

  Flags train_f, eval_f, inspect_f, gen_f, cmp_f, sweep_f;
  std::string resume, checkpoint, split = "test";
  bool normalize = false;
  std::vector<int> cmp_l, sweep_l;
  int n_seeds = 3, jobs = 1;
  std::optional<int> lag, vocab;
  std::optional<long long> length, valid_length;

  auto* train = app.add_subcommand("train", "train one model and score it on the validation split");
  add_run_flags(train, train_f);
  add_filter_flags(train, train_f);
  add_model_flags(train, train_f);
  add_data_flags(train, train_f);
  train->add_option("--resume", resume, "continue from a checkpoint written by train")->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "report raw and per-word perplexity of a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", split, "train | valid | test")->check(CLI::IsMember({"train", "valid", "test"}));
  eval->add_option("--config", eval_f.config, "key = value config file")->check(CLI::ExistingFile);
  eval->add_option("--set", eval_f.sets, "override one data.* / synthetic.* / eval.* key (repeatable)");
  eval->add_option("--out", eval_f.out, "write report JSON (and log-prob dump) here");
  add_data_flags(eval, eval_f);

  auto* inspect = app.add_subcommand("inspect-filters", "write the discretized filter bank as CSV");
  inspect->add_option("--config", inspect_f.config, "key = value config file")->check(CLI::ExistingFile);
  inspect->add_option("--set", inspect_f.sets, "override one config key (repeatable)");
  inspect->add_option("--out", inspect_f.out, "CSV file or directory (default: CSV on stdout)");
  add_filter_flags(inspect, inspect_f);
  inspect->add_flag("--normalize", normalize, "rescale each filter row to unit sum");

  auto* gen = app.add_subcommand("gen-synthetic", "write the lag-copy task streams");
  gen->add_option("--config", gen_f.config, "key = value config file")->check(CLI::ExistingFile);
  gen->add_option("--set", gen_f.sets, "override one config key (repeatable)");
  gen->add_option("--out", gen_f.out, "output directory")->required();
  gen->add_option("--lag", lag, "synthetic.lag, copy distance");
  gen->add_option("--vocab", vocab, "synthetic.vocab, alphabet size");
  gen->add_option("--length", length, "synthetic.length, training tokens");
  gen->add_option("--valid-length", valid_length, "synthetic.valid_length, validation and test tokens");

  auto* cmp = app.add_subcommand("compare", "train scale_invariant and delta_control pairs over seeds");
  add_run_flags(cmp, cmp_f);
  add_filter_flags(cmp, cmp_f);
  add_model_flags(cmp, cmp_f);
  add_data_flags(cmp, cmp_f);
  cmp->add_option("--L-list", cmp_l, "comma-separated L values (default: model.L)")->delimiter(',');
  cmp->add_option("--seeds", n_seeds, "number of seeds, counting up from train.seed")->capture_default_str();

  auto* sweep = app.add_subcommand("sweep", "train one model per L into <out>/L<L>");
  add_run_flags(sweep, sweep_f);
  add_filter_flags(sweep, sweep_f);
  add_model_flags(sweep, sweep_f);
  add_data_flags(sweep, sweep_f);
  sweep->add_option("--L-list", sweep_l, "comma-separated L values (default 5,9,...,53)")->delimiter(',');
  sweep->add_option("--jobs", jobs, "runs trained concurrently")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "logcomp: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*train) return cmd_train(train_f, resume);
    if (*eval) return cmd_eval(eval_f, checkpoint, split);
    if (*inspect) return cmd_inspect(inspect_f, normalize);
    if (*gen) {
      if (lag) gen_f.sets.push_back("synthetic.lag=" + std::to_string(*lag));
      if (vocab) gen_f.sets.push_back("synthetic.vocab=" + std::to_string(*vocab));
      if (length) gen_f.sets.push_back("synthetic.length=" + std::to_string(*length));
      if (valid_length) gen_f.sets.push_back("synthetic.valid_length=" + std::to_string(*valid_length));
      return cmd_gen_synthetic(gen_f);
    }
    if (*cmp) return cmd_compare(cmp_f, cmp_l, n_seeds);
    if (*sweep) return cmd_sweep(sweep_f, sweep_l, jobs);
  } catch (const Error& e) {
    std::cerr << "logcomp: " << e.what() << '\n';
    switch (e.kind()) {
      case ErrorKind::config:
        return 2;
      case ErrorKind::numeric:
        return 3;
      case ErrorKind::io:
        return 4;
    }
  } catch (const fs::filesystem_error& e) {
    std::cerr << "logcomp: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "logcomp: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
