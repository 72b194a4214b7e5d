#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "cmret/error.hpp"
#include "cmret/trainer.hpp"

using namespace cmret;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// 12 identities of 32x16 images with a 2-layer/D=16 model: seconds per run.
struct TinyWorld {
  fs::path dir;
  Dataset dataset;
  RunConfig config;

  explicit TinyWorld(const std::string& name) {
    dir = fs::temp_directory_path() / ("cmret_trainer_" + name);
    fs::remove_all(dir);
    SyntheticConfig syn;
    syn.identity_count = 12;
    syn.images_per_identity = 3;
    syn.image_h = 32;
    syn.image_w = 16;
    syn.train_fraction = 0.6;
    syn.val_fraction = 0.0;
    generate_synthetic(syn, 5, dir / "data");
    dataset = load_dataset(dir / "data" / "manifest.jsonl");

    config.visual.common = {2, 2, 16, 32, 1e-5};
    config.visual.image_h = 32;
    config.visual.image_w = 16;
    config.visual.patch = 8;
    config.text.common = {2, 2, 16, 32, 1e-5};
    config.text.max_len = 18;
    config.text.vocab_size = dataset.manifest.vocab.size();
    config.loss.temperature = 0.05;
    config.optim.learning_rate = 1e-3;
    config.optim.batch_size = 8;
    config.optim.epochs = 2;
    config.seed = 9;
    config.train_manifest = (dir / "data" / "manifest.jsonl").string();
  }
  ~TinyWorld() { fs::remove_all(dir); }

  std::vector<int> classes() const {
    std::set<int> ids;
    for (int idx : dataset.split_indices("train")) {
      ids.insert(dataset.manifest.records[static_cast<size_t>(idx)].identity);
    }
    return {ids.begin(), ids.end()};
  }
};

}  // namespace

TEST_CASE("identical config and seed give identical checkpoints and logs") {
  TinyWorld world("det");
  auto run = [&](const fs::path& out) {
    auto model = build_model(world.config, world.config.text.vocab_size, world.classes());
    model->train_domain = world.dataset.manifest.domain_tag;
    return train_model(*model, world.dataset, out);
  };
  TrainStats a = run(world.dir / "run_a");
  TrainStats b = run(world.dir / "run_b");
  CHECK(slurp(a.final_checkpoint.string() + ".bin") == slurp(b.final_checkpoint.string() + ".bin"));
  CHECK(slurp(a.log_path) == slurp(b.log_path));

  // a different seed diverges
  RunConfig other = world.config;
  other.seed = 10;
  auto model = build_model(other, other.text.vocab_size, world.classes());
  model->train_domain = world.dataset.manifest.domain_tag;
  TrainStats c = train_model(*model, world.dataset, world.dir / "run_c");
  CHECK(slurp(a.final_checkpoint.string() + ".bin") != slurp(c.final_checkpoint.string() + ".bin"));
}

TEST_CASE("checkpoint round-trip preserves evaluation bit-exactly") {
  TinyWorld world("roundtrip");
  auto model = build_model(world.config, world.config.text.vocab_size, world.classes());
  model->train_domain = world.dataset.manifest.domain_tag;
  TrainStats stats = train_model(*model, world.dataset, world.dir / "run");

  EvalOptions options;
  options.lambda_s = 0.5;
  RetrievalResult live = evaluate_model(*model, world.dataset, options);

  auto loaded = load_model(stats.final_checkpoint);
  CHECK(loaded->graph.value_checksum() == model->graph.value_checksum());
  RetrievalResult from_disk = evaluate_model(*loaded, world.dataset, options);
  CHECK(from_disk.fused.v == live.fused.v);
  CHECK(from_disk.mean_ap == live.mean_ap);
  CHECK(from_disk.config_hash == config_hash(world.config));

  // evaluation is read-only
  const std::uint64_t before = loaded->graph.value_checksum();
  evaluate_model(*loaded, world.dataset, options);
  CHECK(loaded->graph.value_checksum() == before);
}

TEST_CASE("lambda = 1 evaluation equals the global-only path") {
  TinyWorld world("lambda");
  auto model = build_model(world.config, world.config.text.vocab_size, world.classes());
  model->train_domain = world.dataset.manifest.domain_tag;
  train_model(*model, world.dataset, world.dir / "run");

  EvalOptions lam1;
  lam1.lambda_s = 1.0;
  RetrievalResult fused = evaluate_model(*model, world.dataset, lam1);

  // Same parameters evaluated as a global-only model
  RunConfig base_cfg = model->config;
  base_cfg.use_grab = false;
  auto baseline = build_model(base_cfg, base_cfg.text.vocab_size, world.classes());
  baseline->train_domain = world.dataset.manifest.domain_tag;
  for (auto& [name, p] : baseline->graph.parameters()) {
    p.values() = model->graph.find(name)->values();
  }
  RetrievalResult global_only = evaluate_model(*baseline, world.dataset, lam1);
  CHECK(fused.rank_k.at(1) == global_only.rank_k.at(1));
  CHECK(fused.mean_ap == global_only.mean_ap);
}

TEST_CASE("retention gap at ratio 1 is exactly zero") {
  TinyWorld world("gap");
  auto model = build_model(world.config, world.config.text.vocab_size, world.classes());
  model->train_domain = world.dataset.manifest.domain_tag;
  train_model(*model, world.dataset, world.dir / "run");
  EvalOptions options;
  options.lambda_s = 0.5;
  CHECK(retention_gap(*model, world.dataset, 1.0, options) == 0.0);
  CHECK(retention_gap(*model, world.dataset, 1.0, options, MaskMode::Token) == 0.0);
  CHECK_THROWS_AS(retention_gap(*model, world.dataset, 0.0, options), Error);
}

TEST_CASE("resume rejects a mismatched config hash") {
  TinyWorld world("resume");
  auto model = build_model(world.config, world.config.text.vocab_size, world.classes());
  model->train_domain = world.dataset.manifest.domain_tag;
  TrainStats stats = train_model(*model, world.dataset, world.dir / "run");

  RunConfig other = world.config;
  other.optim.learning_rate = 5e-4;
  CHECK_THROWS_AS(load_model_for_resume(stats.final_checkpoint, other), Error);

  auto resumed = load_model_for_resume(stats.final_checkpoint, world.config);
  CHECK(resumed->epoch == world.config.optim.epochs);
}

TEST_CASE("out-of-range hyperparameters fail before any compute") {
  TinyWorld world("validate");
  RunConfig bad = world.config;
  bad.optim.learning_rate = -1.0;
  CHECK_THROWS_AS(build_model(bad, bad.text.vocab_size, world.classes()), Error);

  RunConfig bad2 = world.config;
  bad2.ats.rho_start = 0.2;  // below rho_end
  CHECK_THROWS_AS(build_model(bad2, bad2.text.vocab_size, world.classes()), Error);

  RunConfig bad3 = world.config;
  bad3.mars.strategy = "Z";
  CHECK_THROWS_AS(build_model(bad3, bad3.text.vocab_size, world.classes()), Error);
}

TEST_CASE("epoch callback fires with completed epoch counts") {
  TinyWorld world("callback");
  auto model = build_model(world.config, world.config.text.vocab_size, world.classes());
  model->train_domain = world.dataset.manifest.domain_tag;
  std::vector<int> seen;
  EpochCallback cb = [&](Model&, int completed) { seen.push_back(completed); };
  train_model(*model, world.dataset, world.dir / "run", nullptr, &cb);
  CHECK(seen == std::vector<int>{1, 2});
}

TEST_CASE("overlay export writes one outlined raster per sample") {
  TinyWorld world("overlay");
  auto model = build_model(world.config, world.config.text.vocab_size, world.classes());
  model->train_domain = world.dataset.manifest.domain_tag;
  train_model(*model, world.dataset, world.dir / "run");

  CHECK(export_overlays(*model, world.dataset, 0, world.dir / "ov0").empty());

  auto results = export_overlays(*model, world.dataset, 2, world.dir / "ov");
  REQUIRE(results.size() == 2);
  const RetentionSchedule schedule = model->schedule_base(1, 1);
  const int n = model->config.visual.num_patches();
  const int expect_k = budget_at(with_token_count(schedule, n), model->step);
  CHECK(static_cast<int>(results[0].patch_indices.size()) == expect_k);
  CHECK(fs::exists(results[0].image_path));

  // deterministic per (checkpoint, sample)
  auto again = export_overlays(*model, world.dataset, 2, world.dir / "ov2");
  CHECK(again[0].patch_indices == results[0].patch_indices);
  CHECK(slurp(results[0].image_path) == slurp(again[0].image_path));
  const std::string sidecar = slurp(world.dir / "ov" / "overlay_0000.txt");
  CHECK(sidecar.find(config_hash(model->config)) != std::string::npos);
}
