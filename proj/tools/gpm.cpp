// gpm: one subcommand per pipeline stage. Every run writes
// resolved_config.txt and metrics.txt into --out.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include "gpm/gpm.hpp"

using namespace gpm;
namespace fs = std::filesystem;
using F = float;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out = "run";
  std::optional<std::uint64_t> seed;
};

struct Metrics {
  std::vector<std::pair<std::string, std::string>> kv;
  void put(const std::string& k, double v) { kv.emplace_back(k, format_double(v)); }
  void put(const std::string& k, const std::string& v) { kv.emplace_back(k, v); }
};

struct Run {
  ExperimentConfig cfg;
  fs::path out;
  Metrics metrics;

  std::string file(const std::string& name) const { return (out / name).string(); }
};

Run setup(const Common& c, const std::string& subcommand) {
  KeyValues kv;
  if (!c.config_path.empty()) kv = KeyValues::load(c.config_path);
  for (const auto& s : c.sets) kv.set_override(s);
  if (c.seed) {
    kv.set("seed.data", std::to_string(*c.seed), "--seed");
    kv.set("seed.model", std::to_string(*c.seed + 1), "--seed");
    kv.set("seed.sampling", std::to_string(*c.seed + 2), "--seed");
  }
  Run r;
  r.cfg = resolve_config(kv);
  r.out = c.out;
  fs::create_directories(r.out);
  write_key_values(r.file("resolved_config.txt"), config_snapshot(r.cfg), "gpm " + subcommand);
  return r;
}

// Train/test split, the last test_per_class items of each class going to test.
struct Data {
  Dataset train, test;
};

Data load_data(const ExperimentConfig& cfg) {
  Dataset all;
  if (cfg.data.source == "synthetic")
    all = synth_families(cfg.data.classes, cfg.data.per_class + cfg.data.test_per_class, cfg.data.points,
                         cfg.seeds.data, cfg.data.noise);
  else
    all = load_dataset_dir(cfg.data.source, cfg.data.points, cfg.seeds.data);
  all.validate();
  Data d;
  d.train.class_names = d.test.class_names = all.class_names;
  std::map<int, std::size_t> total, seen;
  for (const auto& it : all.items) ++total[it.label];
  for (const auto& it : all.items) {
    const bool test = it.label >= 0 && seen[it.label]++ + cfg.data.test_per_class >= total[it.label];
    (test ? d.test : d.train).items.push_back(it);
  }
  if (d.train.size() == 0) throw DataError("no training items in " + cfg.data.source);
  return d;
}

std::unique_ptr<DVAE<F>> trained_dvae(const ExperimentConfig& cfg) {
  auto m = std::make_unique<DVAE<F>>(cfg.dvae, cfg.seeds.model);
  load_dvae(*m, cfg.dvae_checkpoint);
  return m;
}

std::unique_ptr<GPMTransformer<F>> trained_gpm(const ExperimentConfig& cfg) {
  auto m = std::make_unique<GPMTransformer<F>>(cfg.gpm, cfg.seeds.model);
  load_gpm(*m, cfg.gpm_checkpoint);
  return m;
}

RunOptions options(const Run& r, const std::string& resume, std::uint64_t stop_after) {
  RunOptions o;
  o.out_dir = r.out.string();
  o.resume_from = resume;
  o.stop_after = stop_after;
  o.log_every = r.cfg.log_every;
  o.progress = &std::cerr;
  return o;
}

std::vector<const Encoded<F>*> pointers(const EncodedCorpus<F>& c) {
  std::vector<const Encoded<F>*> out;
  for (const auto& e : c.items) out.push_back(&e);
  return out;
}

SamplingPolicy policy_of(const ExperimentConfig& cfg) {
  return {cfg.generation.mode, cfg.generation.top_k, cfg.generation.temperature, cfg.seeds.sampling};
}

// ------------------------------------------------------------ subcommands

void train_dvae_cmd(Run& r, const std::string& resume, std::uint64_t stop_after) {
  Data d = load_data(r.cfg);
  DVAE<F> model(r.cfg.dvae, r.cfg.seeds.model);
  auto res = train_dvae(model, r.cfg.dvae_train, d.train, r.cfg.seeds, options(r, resume, stop_after));
  r.metrics.put("items", static_cast<double>(d.train.size()));
  r.metrics.put("final_step", static_cast<double>(res.final_step));
  if (!std::isnan(res.initial_eval_chamfer)) r.metrics.put("initial_eval_chamfer", res.initial_eval_chamfer);
  r.metrics.put("final_eval_chamfer", res.final_eval_chamfer);
  if (!std::isnan(res.initial_eval_chamfer))
    r.metrics.put("chamfer_ratio", res.final_eval_chamfer / res.initial_eval_chamfer);
  r.metrics.put("tokenizer_checksum", std::to_string(model.tokenizer_checksum()));
  r.metrics.put("checkpoint", res.checkpoint);
}

void train_gpm_cmd(Run& r, const std::string& resume, std::uint64_t stop_after, bool b_first) {
  Data d = load_data(r.cfg);
  auto dvae = trained_dvae(r.cfg);
  auto corpus = encode_dataset(*dvae, d.train, r.cfg.seeds.data);
  GPMTransformer<F> model(r.cfg.gpm, r.cfg.seeds.model);
  auto res = train_gpm(model, *dvae, r.cfg.gpm_train, corpus, r.cfg.seeds, options(r, resume, stop_after), b_first);
  r.metrics.put("items", static_cast<double>(corpus.items.size()));
  r.metrics.put("final_step", static_cast<double>(res.final_step));
  if (!std::isnan(res.initial_eval.total)) {
    r.metrics.put("initial_eval_total", res.initial_eval.total);
    r.metrics.put("initial_eval_ae", res.initial_eval.ae);
    r.metrics.put("initial_eval_ar", res.initial_eval.ar);
  }
  r.metrics.put("final_eval_total", res.final_eval.total);
  r.metrics.put("final_eval_ae", res.final_eval.ae);
  r.metrics.put("final_eval_ar", res.final_eval.ar);
  r.metrics.put("tokenizer_checksum_before", std::to_string(res.tokenizer_checksum_before));
  r.metrics.put("tokenizer_checksum_after", std::to_string(res.tokenizer_checksum_after));
  r.metrics.put("checkpoint", res.checkpoint);
}

void tokenize_cmd(Run& r) {
  Data d = load_data(r.cfg);
  auto dvae = trained_dvae(r.cfg);
  std::ofstream os(r.file("tokens.txt"));
  if (!os) throw IoError("cannot write " + r.file("tokens.txt"));
  std::set<std::size_t> used;
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    auto [seq, patches] = dvae->tokenize(d.train.items[i].cloud, cloud_patch_seed(r.cfg.seeds.data, i));
    write_token_line(os, d.train.items[i].id, seq.tokens);
    used.insert(seq.tokens.begin(), seq.tokens.end());
  }
  r.metrics.put("clouds", static_cast<double>(d.train.size()));
  r.metrics.put("distinct_tokens", static_cast<double>(used.size()));
}

void reconstruct_cmd(Run& r) {
  Data d = load_data(r.cfg);
  auto dvae = trained_dvae(r.cfg);
  double mean = 0;
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    const auto& it = d.train.items[i];
    PointCloud rec = dvae->reconstruct(it.cloud, cloud_patch_seed(r.cfg.seeds.data, i));
    const double cd = chamfer_l1(rec, it.cloud, r.cfg.dvae.chamfer_norm);
    write_cloud(r.file(it.id + "_recon.xyz"), rec);
    write_svg_projections(rec, r.file(it.id + "_recon.svg"), it.id + " reconstruction");
    r.metrics.put("chamfer." + it.id, cd);
    mean += cd / static_cast<double>(d.train.size());
  }
  r.metrics.put("mean_chamfer", mean);
}

void generate_cmd(Run& r) {
  auto dvae = trained_dvae(r.cfg);
  auto model = trained_gpm(r.cfg);
  const auto& g = r.cfg.generation;
  std::vector<std::vector<std::size_t>> sequences;
  if (g.unconditional) {
    const auto centers = canonical_centers(r.cfg.dvae.num_groups, r.cfg.seeds.data);
    for (std::size_t n = 0; n < g.count; ++n) {
      SamplingPolicy p = policy_of(r.cfg);
      p.seed = derive_seed(p.seed, {n});
      auto res = generate_unconditional(*dvae, *model, centers, p);
      const std::string id = "sample" + std::to_string(n);
      write_cloud(r.file(id + ".xyz"), res.cloud);
      write_svg_projections(res.cloud, r.file(id + ".svg"), id);
      write_token_trace(r.file(id + "_trace.tsv"), res.trace);
      sequences.push_back(res.tokens);
    }
  } else {
    Data d = load_data(r.cfg);
    const std::size_t n_items = std::min(g.count, d.train.size());
    double mean = 0;
    for (std::size_t i = 0; i < n_items; ++i) {
      const auto& it = d.train.items[i];
      const auto seed = cloud_patch_seed(r.cfg.seeds.data, i);
      auto [seq, patches] = dvae->tokenize(it.cloud, seed);
      Rng rng = make_rng(r.cfg.seeds.sampling, {0x6E4ULL, i});
      auto mask = mask_region_around(patches.centers, uniform_index(rng, patches.centers.size()),
                                     mask_count(g.mask_ratio, patches.centers.size()));
      SamplingPolicy p = policy_of(r.cfg);
      p.seed = derive_seed(p.seed, {i});
      auto res = generate_masked_region(*dvae, *model, it.cloud, seed, mask, p);
      const double cd = chamfer_l1(res.cloud, it.cloud, r.cfg.dvae.chamfer_norm);
      write_cloud(r.file(it.id + "_generated.xyz"), res.cloud);
      write_svg_projections(res.cloud, r.file(it.id + "_generated.svg"), it.id + " masked-region generation");
      write_token_trace(r.file(it.id + "_trace.tsv"), res.trace);
      r.metrics.put("chamfer." + it.id, cd);
      r.metrics.put("masked." + it.id, static_cast<double>(mask.size()));
      mean += cd / static_cast<double>(n_items);
      sequences.push_back(res.tokens);
    }
    r.metrics.put("mean_chamfer", mean);
  }
  r.metrics.put("samples", static_cast<double>(sequences.size()));
  r.metrics.put("token_entropy_bits", token_entropy(sequences));
}

struct ClassifyOutcome {
  ClassifyResult res;
  std::size_t train_items = 0, test_items = 0;
};

ClassifyOutcome classify_with(const ExperimentConfig& cfg, const DVAE<F>& dvae, const GPMTransformer<F>& backbone,
                              const Data& d) {
  if (d.test.size() == 0) throw InvalidArgument("classify needs a test split (set data.test_per_class)");
  auto tr = encode_dataset(dvae, d.train, cfg.seeds.data);
  auto te = encode_dataset(dvae, d.test, derive_seed(cfg.seeds.data, {0x7E57ULL}));
  Classifier<F> clf(backbone, d.train.class_names.size(), cfg.classify, cfg.seeds.model);
  ClassifyOutcome o;
  o.res = finetune_classifier(clf, pointers(tr), tr.labels, pointers(te), te.labels, cfg.classify, cfg.seeds);
  o.train_items = tr.items.size();
  o.test_items = te.items.size();
  return o;
}

void classify_cmd(Run& r) {
  Data d = load_data(r.cfg);
  auto dvae = trained_dvae(r.cfg);
  auto model = trained_gpm(r.cfg);
  auto o = classify_with(r.cfg, *dvae, *model, d);
  r.metrics.put("classes", static_cast<double>(d.train.class_names.size()));
  r.metrics.put("train_items", static_cast<double>(o.train_items));
  r.metrics.put("test_items", static_cast<double>(o.test_items));
  r.metrics.put("steps", static_cast<double>(o.res.steps));
  r.metrics.put("initial_test_accuracy", o.res.initial_test_accuracy);
  r.metrics.put("train_accuracy", o.res.train_accuracy);
  r.metrics.put("test_accuracy", o.res.test_accuracy);
  std::ofstream os(r.file("classify_loss.tsv"));
  os << "step\tloss\n";
  for (std::size_t s = 0; s < o.res.losses.size(); ++s) os << s << '\t' << o.res.losses[s] << '\n';
}

void few_shot_cmd(Run& r) {
  Data d = load_data(r.cfg);
  auto dvae = trained_dvae(r.cfg);
  auto model = trained_gpm(r.cfg);
  Dataset all = d.train;
  all.items.insert(all.items.end(), d.test.items.begin(), d.test.items.end());
  auto corpus = encode_dataset(*dvae, all, r.cfg.seeds.data);
  auto rep = few_shot_eval(*model, corpus, all.class_names, r.cfg.few_shot, r.cfg.classify, r.cfg.seeds);
  for (std::size_t i = 0; i < rep.accuracies.size(); ++i) r.metrics.put("run" + std::to_string(i), rep.accuracies[i]);
  r.metrics.put("mean_accuracy", rep.mean);
  r.metrics.put("std_accuracy", rep.stddev);
}

// AE-only vs AE+AR, crossed with PartA-first vs PartB-first.
void ablate_cmd(Run& r) {
  Data d = load_data(r.cfg);
  auto dvae = trained_dvae(r.cfg);
  auto corpus = encode_dataset(*dvae, d.train, r.cfg.seeds.data);
  std::ofstream table(r.file("ablation.tsv"));
  table << "objective\torder\tinitial_loss\tfinal_loss\tfinal_ae\tfinal_ar\ttest_accuracy\n";
  for (const bool ar : {false, true})
    for (const bool b_first : {false, true}) {
      const std::string objective = ar ? "ae+ar" : "ae", order = b_first ? "B-A" : "A-B";
      const std::string tag = objective + "_" + order;
      ExperimentConfig cfg = r.cfg;
      if (!ar) cfg.gpm.w_ar = 0.0;
      GPMTransformer<F> model(cfg.gpm, cfg.seeds.model);
      RunOptions o;
      o.out_dir = (r.out / tag).string();
      o.log_every = cfg.log_every;
      o.progress = &std::cerr;
      auto res = train_gpm(model, *dvae, cfg.gpm_train, corpus, cfg.seeds, o, b_first);
      double acc = std::nan("");
      if (d.test.size() > 0) acc = classify_with(cfg, *dvae, model, d).res.test_accuracy;
      table << objective << '\t' << order << '\t' << res.initial_eval.total << '\t' << res.final_eval.total << '\t'
            << res.final_eval.ae << '\t' << res.final_eval.ar << '\t' << acc << '\n';
      r.metrics.put(tag + ".final_loss", res.final_eval.total);
      r.metrics.put(tag + ".test_accuracy", acc);
    }
}

void gradcheck_cmd(Run& r) {
  double worst = 0;
  bool ok = true;
  for (const auto& c : checks::gradient_cases()) {
    const auto res = c.run();
    std::cout << c.name << '\t' << res.max_relative_error << '\n';
    r.metrics.put("rel_err." + c.name, res.max_relative_error);
    worst = std::max(worst, res.max_relative_error);
    ok = ok && res.max_relative_error < 1e-4;
  }
  r.metrics.put("max_relative_error", worst);
  if (!ok) throw NumericFailure("gradcheck: max relative error " + format_double(worst) + " exceeds 1e-4");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generative point-cloud pretraining: tokenizer, transformer and downstream runs"};
  app.require_subcommand(1, 1);
  Common common;
  std::string resume;
  std::uint64_t stop_after = 0;
  bool b_first = false;

  auto add = [&](const std::string& name, const std::string& help) {
    auto* s = app.add_subcommand(name, help);
    s->add_option("--config", common.config_path, "key = value config file")->check(CLI::ExistingFile);
    s->add_option("--set", common.sets, "override one key (key=value), repeatable");
    s->add_option("--out", common.out, "output directory (created if absent)");
    s->add_option("--seed", common.seed, "base seed: data = N, model = N+1, sampling = N+2");
    return s;
  };
  auto* tdv = add("train-dvae", "train the point tokenizer");
  auto* tgp = add("train-gpm", "pretrain the transformer on frozen tokens");
  for (auto* s : {tdv, tgp}) {
    s->add_option("--resume", resume, "continue from a training checkpoint");
    s->add_option("--stop-after", stop_after, "stop at this step (0: run to the end)");
  }
  tgp->add_flag("--b-first", b_first, "put PartB before PartA in the sequence");
  add("tokenize", "write one token line per cloud");
  add("reconstruct", "tokenize and decode every cloud");
  add("generate", "masked-region or unconditional generation");
  add("classify", "fine-tune a classifier on the train split, score the test split");
  add("few-shot", "way-shot episodes, mean and std over runs");
  add("ablate", "AE-only vs AE+AR crossed with both sequence orders");
  add("gradcheck", "finite-difference suite over every differentiable piece");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  const std::string sub = app.get_subcommands().front()->get_name();
  try {
    Run r = setup(common, sub);
    const auto t0 = std::chrono::steady_clock::now();
    if (sub == "train-dvae") train_dvae_cmd(r, resume, stop_after);
    else if (sub == "train-gpm") train_gpm_cmd(r, resume, stop_after, b_first);
    else if (sub == "tokenize") tokenize_cmd(r);
    else if (sub == "reconstruct") reconstruct_cmd(r);
    else if (sub == "generate") generate_cmd(r);
    else if (sub == "classify") classify_cmd(r);
    else if (sub == "few-shot") few_shot_cmd(r);
    else if (sub == "ablate") ablate_cmd(r);
    else if (sub == "gradcheck") gradcheck_cmd(r);
    r.metrics.put("seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    write_key_values(r.file("metrics.txt"), r.metrics.kv, "gpm " + sub);
    for (const auto& [k, v] : r.metrics.kv) std::cout << k << " = " << v << '\n';
  } catch (const Error& e) {
    std::cerr << "gpm " << sub << ": " << e.category() << ": " << e.what() << '\n';
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "gpm " << sub << ": " << e.what() << '\n';
    return 1;
  }
  return 0;
}
