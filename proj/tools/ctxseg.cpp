// Command-line entry point: synthetic data, preprocessing cache, joint and
// downstream training, evaluation, generalization, heatmaps, and the fusion
// cost benchmark. Every subcommand takes --config/--seed/--out plus --set
// path=value overrides, and writes a resolved-config snapshot next to its
// outputs.

#include "ctxseg/bench.hpp"
#include "ctxseg/checkpoint.hpp"
#include "ctxseg/config.hpp"
#include "ctxseg/evaluator.hpp"
#include "ctxseg/io.hpp"
#include "ctxseg/synthgen.hpp"
#include "ctxseg/trainer.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ctxseg;

namespace {

struct CommonArgs {
  std::string config;
  std::string out;
  long long seed = -1;
  std::vector<std::string> sets;
  std::string precision = "float";
};

void add_common(CLI::App* cmd, CommonArgs& a, bool config_required = true) {
  auto* c = cmd->add_option("--config", a.config, "JSON config file");
  if (config_required) c->required();
  cmd->add_option("--out", a.out, "output directory")->required();
  cmd->add_option("--seed", a.seed, "seed override");
  cmd->add_option("--set", a.sets, "config override path=value (repeatable)");
  cmd->add_option("--precision", a.precision, "float|double")->check(CLI::IsMember({"float", "double"}));
}

json resolve(const CommonArgs& a) {
  json j = resolve_config(a.config, a.sets);
  // CTXSEG_CACHE_DIR is a convenience alias for data.cache_dir.
  if (const char* env = std::getenv("CTXSEG_CACHE_DIR")) {
    if (!j.contains("data") || !j["data"].contains("cache_dir")) j["data"]["cache_dir"] = env;
  }
  if (a.seed >= 0) {
    j["seed"] = a.seed;
    if (j.contains("train")) j["train"]["seed"] = a.seed;
  }
  return j;
}

void write_snapshot(const CommonArgs& a, const std::string& command, const json& resolved) {
  fs::create_directories(a.out);
  json snap = resolved;
  snap["__command"] = command;
  snap["__config_hash"] = config_hash(resolved);
  write_json_file((fs::path(a.out) / "resolved_config.json").string(), snap);
}

std::string cache_dir_of(const json& cfg) {
  require(cfg.contains("data") && cfg["data"].contains("cache_dir"), "config",
          "config needs data.cache_dir (or CTXSEG_CACHE_DIR)");
  return cfg["data"]["cache_dir"].get<std::string>();
}

std::uint64_t seed_of(const json& cfg, std::uint64_t fallback = 0) {
  if (cfg.contains("train") && cfg["train"].contains("seed"))
    return cfg["train"]["seed"].get<std::uint64_t>();
  return cfg.value("seed", fallback);
}

// ---------------------------------------------------------------------------

int run_synth(const CommonArgs& a) {
  json cfg = resolve(a);
  SynthSpec spec = SynthSpec::from_json(cfg);
  if (a.seed >= 0) spec.seed = static_cast<std::uint64_t>(a.seed);
  write_snapshot(a, "synth", spec.to_json());
  generate_collection(spec, a.out);
  std::cout << "wrote collection with " << spec.datasets.size() << " datasets to " << a.out
            << "\n";
  return 0;
}

int run_preprocess(const CommonArgs& a) {
  json cfg = resolve(a);
  write_snapshot(a, "preprocess", cfg);
  require(cfg.contains("registry"), "config", "preprocess config needs 'registry'");
  std::string reg_path = cfg["registry"].get<std::string>();
  if (fs::path(reg_path).is_relative() && !a.config.empty())
    reg_path = (fs::path(a.config).parent_path() / reg_path).string();

  std::vector<SharedTaskRule> rules;
  auto configs = load_dataset_configs(reg_path, &rules);

  CollectiveRegistry registry;
  if (cfg.contains("base_checkpoint")) {
    // Extend an existing assignment so downstream ids line up with the
    // upstream checkpoint.
    auto base = load_checkpoint<float>(cfg["base_checkpoint"].get<std::string>());
    registry = extend_collective(base.registry, configs, rules);
  } else {
    registry = build_collective(configs, rules);
  }

  PreprocessOptions opt;
  if (cfg.contains("target_spacing")) {
    auto s = cfg["target_spacing"];
    opt.target_spacing = Vector3d(s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>());
  }
  opt.train_fraction = cfg.value("train_fraction", opt.train_fraction);
  opt.split_seed = cfg.value("split_seed", static_cast<std::uint64_t>(seed_of(cfg)));

  CollectiveRegistry to_cache = registry;
  if (cfg.contains("datasets")) {
    // cache only the listed datasets; the registry snapshot keeps everything
    auto keys = cfg["datasets"].get<std::vector<std::string>>();
    std::map<std::string, DatasetDescriptor> keep;
    for (const auto& k : keys) keep[k] = registry.dataset(k);
    to_cache.datasets = keep;
  }
  PreprocessedStore store = run_preprocess(to_cache, a.out, opt);
  store.registry = registry;
  store.save_manifest(a.out);
  std::cout << "cached " << store.datasets.size() << " datasets ("
            << registry.task_count() << " tasks, " << registry.modality_count()
            << " modalities) to " << a.out << "\n";
  return 0;
}

template <typename T>
int run_train(const CommonArgs& a) {
  json cfg = resolve(a);
  write_snapshot(a, "train", cfg);
  PreprocessedStore store = PreprocessedStore::load(cache_dir_of(cfg));
  if (cfg["data"].contains("datasets"))
    store = store.subset_datasets(cfg["data"]["datasets"].get<std::vector<std::string>>());

  ModelConfig mc = ModelConfig::from_json(cfg.value("model", json::object()));
  TrainConfig tc = TrainConfig::from_json(cfg.value("train", json::object()));
  if (a.seed >= 0) tc.seed = static_cast<std::uint64_t>(a.seed);

  SegModel<T> model(mc, store.registry.task_count(), store.registry.modality_count(), tc.seed);
  std::cout << "model parameters: " << model.parameter_count() << "\n";

  Trainer<T> trainer(model, store, tc);
  std::ofstream log(fs::path(a.out) / "train_log.jsonl");
  T final_loss = trainer.run(&log);
  std::cout << "final epoch mean loss: " << static_cast<double>(final_loss) << "\n";

  save_checkpoint(fs::path(a.out) / "checkpoint.ckpt", model, store.registry,
                  config_hash(cfg), tc.epochs, trainer.rng_state());
  return 0;
}

template <typename T>
int run_eval(const CommonArgs& a, const std::string& checkpoint, const std::string& dataset,
             const std::string& split, double overlap, const std::string& tasks_csv) {
  json cfg = resolve(a);
  write_snapshot(a, "eval", cfg);
  auto loaded = load_checkpoint<T>(checkpoint);
  PreprocessedStore store = PreprocessedStore::load(cache_dir_of(cfg));
  require(store.registry.content_hash() == loaded.registry.content_hash(), "checkpoint",
          "cache registry does not match the checkpoint registry");

  std::vector<int> subset;
  if (!tasks_csv.empty()) {
    std::stringstream ss(tasks_csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) subset.push_back(std::stoi(tok));
  }
  Shape3 patch = loaded.model->config().backbone.patch_size;
  EvalReport report = evaluate(*loaded.model, store, dataset, subset,
                               eval_split_from_string(split), patch, overlap);
  write_json_file((fs::path(a.out) / ("eval_" + dataset + ".json")).string(), report.to_json());
  report.write_csv((fs::path(a.out) / ("eval_" + dataset + ".csv")).string());
  std::cout << "dataset " << dataset << " mean dice " << report.mean_dice << "\n";
  for (const auto& r : report.per_task)
    std::cout << "  task " << r.task_id << " (" << r.task_name << "): " << r.mean_dice << "\n";
  return 0;
}

// Verifies that `grown` extends `base` without moving existing assignments.
void require_registry_extends(const CollectiveRegistry& base, const CollectiveRegistry& grown) {
  require(grown.task_count() >= base.task_count(), "registry",
          "downstream registry lost tasks");
  for (int t = 0; t < base.task_count(); ++t) {
    require(grown.tasks[static_cast<size_t>(t)].name == base.tasks[static_cast<size_t>(t)].name &&
                grown.tasks[static_cast<size_t>(t)].source_dataset ==
                    base.tasks[static_cast<size_t>(t)].source_dataset,
            "registry", "downstream registry reassigned task id " + std::to_string(t));
  }
}

template <typename T>
int run_incremental(const CommonArgs& a, const std::string& checkpoint) {
  json cfg = resolve(a);
  write_snapshot(a, "incremental", cfg);
  auto loaded = load_checkpoint<T>(checkpoint);
  PreprocessedStore store = PreprocessedStore::load(cache_dir_of(cfg));
  require_registry_extends(loaded.registry, store.registry);
  const int n_old = loaded.registry.task_count();
  const int n_new = store.registry.task_count() - n_old;
  require(n_new > 0, "config", "cache registry adds no new tasks over the checkpoint");

  TrainConfig tc = TrainConfig::from_json(cfg.value("train", json::object()));
  if (a.seed >= 0) tc.seed = static_cast<std::uint64_t>(a.seed);
  tc.freeze_policy = "backbone_and_old_tokens";
  tc.first_trainable_task = n_old;

  loaded.model->extend_tasks(n_new, tc.seed);
  if (cfg["data"].contains("datasets"))
    store = store.subset_datasets(cfg["data"]["datasets"].get<std::vector<std::string>>());

  Trainer<T> trainer(*loaded.model, store, tc);
  std::ofstream log(fs::path(a.out) / "train_log.jsonl");
  T final_loss = trainer.run(&log);
  std::cout << "incremental finetune: " << n_new << " new task rows, final loss "
            << static_cast<double>(final_loss) << "\n";
  save_checkpoint(fs::path(a.out) / "checkpoint.ckpt", *loaded.model, store.registry,
                  config_hash(cfg), tc.epochs, trainer.rng_state());
  return 0;
}

template <typename T>
int run_transfer(const CommonArgs& a, const std::string& checkpoint, double fraction, int runs,
                 bool scratch) {
  json cfg = resolve(a);
  cfg["transfer"]["fraction"] = fraction;
  cfg["transfer"]["runs"] = runs;
  cfg["transfer"]["scratch"] = scratch;
  write_snapshot(a, "transfer", cfg);
  require(cfg.contains("transfer") && cfg["transfer"].contains("dataset"), "config",
          "transfer config needs transfer.dataset");
  const std::string key = cfg["transfer"]["dataset"].get<std::string>();

  PreprocessedStore store = PreprocessedStore::load(cache_dir_of(cfg));
  TrainConfig tc = TrainConfig::from_json(cfg.value("train", json::object()));
  if (a.seed >= 0) tc.seed = static_cast<std::uint64_t>(a.seed);

  const auto& cached = store.dataset(key);
  std::vector<int> train_pool = cached.train_indices();
  require(!train_pool.empty(), "data", "downstream dataset has no train split");
  int n_take = std::max(1, static_cast<int>(std::lround(fraction * train_pool.size())));

  json all_runs = json::array();
  std::vector<double> run_means;
  for (int r = 0; r < runs; ++r) {
    Rng rng = make_rng(derive_seed(tc.seed, 0x7AAFu, static_cast<std::uint64_t>(r)));
    std::vector<int> pool = train_pool;
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(static_cast<size_t>(n_take));

    std::unique_ptr<SegModel<T>> model;
    CollectiveRegistry registry = store.registry;
    if (scratch) {
      ModelConfig mc = ModelConfig::from_json(cfg.value("model", json::object()));
      model = std::make_unique<SegModel<T>>(mc, registry.task_count(),
                                            registry.modality_count(),
                                            derive_seed(tc.seed, static_cast<std::uint64_t>(r)));
    } else {
      auto loaded = load_checkpoint<T>(checkpoint);
      require_registry_extends(loaded.registry, registry);
      int n_new = registry.task_count() - loaded.registry.task_count();
      if (n_new > 0) loaded.model->extend_tasks(n_new, tc.seed);
      model = std::move(loaded.model);
    }

    PreprocessedStore run_store =
        store.subset_datasets({key}).with_train_subset(key, pool);
    TrainConfig run_tc = tc;
    run_tc.seed = derive_seed(tc.seed, 0x55EDu, static_cast<std::uint64_t>(r));
    Trainer<T> trainer(*model, run_store, run_tc);
    trainer.run(nullptr);

    EvalReport rep = evaluate(*model, store, key, {}, EvalSplit::eval,
                              model->config().backbone.patch_size, 0.5);
    all_runs.push_back(rep.to_json());
    run_means.push_back(rep.mean_dice);
    std::cout << "run " << r << " (" << n_take << " samples): mean dice " << rep.mean_dice
              << "\n";
  }
  double mean = 0;
  for (double m : run_means) mean += m;
  mean /= runs;
  json out = {{"dataset", key},     {"fraction", fraction}, {"runs", runs},
              {"scratch", scratch}, {"mean_dice", mean},    {"per_run", all_runs}};
  write_json_file((fs::path(a.out) / "transfer_report.json").string(), out);
  std::cout << "transfer mean dice over " << runs << " runs: " << mean << "\n";
  return 0;
}

template <typename T>
int run_generalize(const CommonArgs& a, const std::string& checkpoint) {
  json cfg = resolve(a);
  write_snapshot(a, "generalize", cfg);
  require(cfg.contains("generalize"), "config", "config needs a 'generalize' section");
  const auto& gc = cfg["generalize"];
  const std::string source = gc.at("source").get<std::string>();
  const std::string target = gc.at("target").get<std::string>();

  auto loaded = load_checkpoint<T>(checkpoint);
  PreprocessedStore store = PreprocessedStore::load(cache_dir_of(cfg));

  std::vector<GeneralizeMapping> mapping;
  for (const auto& m : gc.at("mapping")) {
    GeneralizeMapping gm;
    if (m.at("source_task").is_string())
      gm.source_task_id =
          store.registry.find_task(source, m.at("source_task").get<std::string>());
    else
      gm.source_task_id = m.at("source_task").get<int>();
    require(gm.source_task_id >= 0, "config", "generalize mapping: unknown source task");
    gm.target_label_value = m.at("target_label_value").get<int>();
    mapping.push_back(gm);
  }

  EvalReport rep = generalize(*loaded.model, store, source, target, mapping,
                              loaded.model->config().backbone.patch_size,
                              gc.value("overlap", 0.5));
  write_json_file((fs::path(a.out) / "generalize_report.json").string(), rep.to_json());
  rep.write_csv((fs::path(a.out) / "generalize_report.csv").string());
  std::cout << "generalize " << source << " -> " << target << ": mean dice " << rep.mean_dice
            << "\n";
  return 0;
}

template <typename T>
int run_viz(const CommonArgs& a, const std::string& checkpoint, const std::string& dataset,
            int sample) {
  json cfg = resolve(a);
  write_snapshot(a, "viz", cfg);
  auto loaded = load_checkpoint<T>(checkpoint);
  PreprocessedStore store = PreprocessedStore::load(cache_dir_of(cfg));
  Volume image = store.load_image(dataset, sample);
  const auto& ds = store.registry.dataset(dataset);
  auto files = export_prototype_heatmaps(*loaded.model, image, ds.task_ids, ds.modality_id,
                                         store.registry, a.out);
  for (const auto& f : files) std::cout << "wrote " << f << "\n";
  return 0;
}

int run_bench(const CommonArgs& a) {
  json cfg = resolve(a);
  write_snapshot(a, "bench-fusion", cfg);
  const auto& bc = cfg.value("bench", json::object());
  int n_small = bc.value("n_small", 512);
  int factor = bc.value("factor", 8);
  int tokens = bc.value("tokens", 12);
  int width = bc.value("width", 64);
  int heads = bc.value("heads", 4);
  int reps = bc.value("reps", 9);

  json out;
  for (auto [name, variant] :
       std::initializer_list<std::pair<const char*, FusionVariant>>{
           {"bidirectional", FusionVariant::bidirectional},
           {"unidirectional", FusionVariant::unidirectional},
           {"joint", FusionVariant::joint}}) {
    auto r = bench_fusion<double>(variant, n_small, factor, tokens, width, heads, reps);
    out[name] = {{"n_small", r.n_small},
                 {"n_large", r.n_large},
                 {"seconds_small", r.seconds_small},
                 {"seconds_large", r.seconds_large},
                 {"ratio", r.ratio}};
    std::cout << name << ": t(" << r.n_small << ") = " << r.seconds_small << "s, t("
              << r.n_large << ") = " << r.seconds_large << "s, ratio " << r.ratio << "\n";
  }
  write_json_file((fs::path(a.out) / "bench_fusion.json").string(), out);
  return 0;
}

int guarded(const CommonArgs& a, const std::string& command, const std::function<int()>& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    json rec = {{"error", {{"kind", e.kind()}, {"message", e.what()}, {"command", command}}}};
    std::cerr << rec.dump() << "\n";
    if (!a.out.empty()) {
      std::error_code ec;
      fs::create_directories(a.out, ec);
      if (!ec) write_json_file((fs::path(a.out) / "error.json").string(), rec);
    }
    return 1;
  } catch (const std::exception& e) {
    json rec = {{"error", {{"kind", "internal"}, {"message", e.what()}, {"command", command}}}};
    std::cerr << rec.dump() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"ctxseg: oracle-conditioned universal volumetric segmentation"};
  app.require_subcommand(1);

  CommonArgs synth_a;
  auto* synth = app.add_subcommand("synth", "generate a synthetic collection");
  add_common(synth, synth_a);

  CommonArgs pre_a;
  auto* pre = app.add_subcommand("preprocess", "build the preprocessed cache");
  add_common(pre, pre_a);

  CommonArgs train_a;
  auto* train = app.add_subcommand("train", "joint training on the cached collection");
  add_common(train, train_a);

  CommonArgs eval_a;
  std::string eval_ckpt, eval_ds, eval_split = "eval", eval_tasks;
  double eval_overlap = 0.5;
  auto* eval = app.add_subcommand("eval", "per-task dice on a registered dataset");
  add_common(eval, eval_a, false);
  eval->add_option("--checkpoint", eval_ckpt)->required();
  eval->add_option("--dataset", eval_ds)->required();
  eval->add_option("--split", eval_split)->check(CLI::IsMember({"train", "eval", "all"}));
  eval->add_option("--overlap", eval_overlap);
  eval->add_option("--tasks", eval_tasks, "comma-separated task ids");

  CommonArgs tr_a;
  std::string tr_ckpt;
  double tr_fraction = 1.0;
  int tr_runs = 1;
  bool tr_scratch = false;
  auto* transfer = app.add_subcommand("transfer", "full finetune on a downstream fraction");
  add_common(transfer, tr_a);
  transfer->add_option("--checkpoint", tr_ckpt, "upstream checkpoint (omit with --scratch)");
  transfer->add_option("--fraction", tr_fraction)->check(CLI::Range(0.0, 1.0));
  transfer->add_option("--runs", tr_runs)->check(CLI::PositiveNumber);
  transfer->add_flag("--scratch", tr_scratch, "train from scratch instead of the checkpoint");

  CommonArgs inc_a;
  std::string inc_ckpt;
  auto* inc = app.add_subcommand("incremental", "frozen-backbone finetune of new task tokens");
  add_common(inc, inc_a);
  inc->add_option("--checkpoint", inc_ckpt)->required();

  CommonArgs gen_a;
  std::string gen_ckpt;
  auto* gen = app.add_subcommand("generalize", "zero-shot evaluation through a class mapping");
  add_common(gen, gen_a);
  gen->add_option("--checkpoint", gen_ckpt)->required();

  CommonArgs viz_a;
  std::string viz_ckpt, viz_ds;
  int viz_sample = 0;
  auto* viz = app.add_subcommand("viz", "export posterior prototype heatmaps");
  add_common(viz, viz_a, false);
  viz->add_option("--checkpoint", viz_ckpt)->required();
  viz->add_option("--dataset", viz_ds)->required();
  viz->add_option("--sample", viz_sample);

  CommonArgs bench_a;
  auto* bench = app.add_subcommand("bench-fusion", "wall-time scaling of the fusion variants");
  add_common(bench, bench_a, false);

  CLI11_PARSE(app, argc, argv);

  auto dispatch = [](const CommonArgs& a, const std::string& cmd,
                     auto&& f32, auto&& f64) -> int {
    if (a.precision == "double") return guarded(a, cmd, f64);
    return guarded(a, cmd, f32);
  };

  if (synth->parsed()) return guarded(synth_a, "synth", [&] { return run_synth(synth_a); });
  if (pre->parsed()) return guarded(pre_a, "preprocess", [&] { return run_preprocess(pre_a); });
  if (train->parsed())
    return dispatch(train_a, "train", [&] { return run_train<float>(train_a); },
                    [&] { return run_train<double>(train_a); });
  if (eval->parsed())
    return dispatch(eval_a, "eval",
                    [&] { return run_eval<float>(eval_a, eval_ckpt, eval_ds, eval_split,
                                                 eval_overlap, eval_tasks); },
                    [&] { return run_eval<double>(eval_a, eval_ckpt, eval_ds, eval_split,
                                                  eval_overlap, eval_tasks); });
  if (transfer->parsed())
    return dispatch(tr_a, "transfer",
                    [&] { return run_transfer<float>(tr_a, tr_ckpt, tr_fraction, tr_runs,
                                                     tr_scratch); },
                    [&] { return run_transfer<double>(tr_a, tr_ckpt, tr_fraction, tr_runs,
                                                      tr_scratch); });
  if (inc->parsed())
    return dispatch(inc_a, "incremental", [&] { return run_incremental<float>(inc_a, inc_ckpt); },
                    [&] { return run_incremental<double>(inc_a, inc_ckpt); });
  if (gen->parsed())
    return dispatch(gen_a, "generalize", [&] { return run_generalize<float>(gen_a, gen_ckpt); },
                    [&] { return run_generalize<double>(gen_a, gen_ckpt); });
  if (viz->parsed())
    return dispatch(viz_a, "viz",
                    [&] { return run_viz<float>(viz_a, viz_ckpt, viz_ds, viz_sample); },
                    [&] { return run_viz<double>(viz_a, viz_ckpt, viz_ds, viz_sample); });
  if (bench->parsed())
    return guarded(bench_a, "bench-fusion", [&] { return run_bench(bench_a); });
  return 1;
}
