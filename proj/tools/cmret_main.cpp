#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>

#include <nlohmann/json.hpp>

#include "cmret/config.hpp"
#include "cmret/dataset.hpp"
#include "cmret/error.hpp"
#include "cmret/hashutil.hpp"
#include "cmret/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cmret;

namespace {

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return 2;
    case ErrorKind::Data: return 3;
    case ErrorKind::Numeric: return 4;
    default: return 1;
  }
}

fs::path resolve_output(const std::string& path) {
  fs::path p(path);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("CMRET_OUTPUT_ROOT")) return fs::path(root) / p;
  return p;
}

std::string join_command(int argc, char** argv) {
  std::string cmd;
  for (int i = 0; i < argc; ++i) {
    if (i) cmd += ' ';
    cmd += argv[i];
  }
  return cmd;
}

std::vector<double> parse_lambda_sweep(const std::string& spec) {
  std::vector<double> out;
  size_t pos = 0;
  while (pos < spec.size()) {
    size_t comma = spec.find(',', pos);
    if (comma == std::string::npos) comma = spec.size();
    out.push_back(std::stod(spec.substr(pos, comma - pos)));
    pos = comma + 1;
  }
  if (out.empty()) fail(ErrorKind::Config, "empty lambda sweep");
  return out;
}

std::vector<int> train_identities(const Dataset& dataset) {
  std::set<int> ids;
  for (int idx : dataset.split_indices("train")) {
    ids.insert(dataset.manifest.records[static_cast<size_t>(idx)].identity);
  }
  return {ids.begin(), ids.end()};
}

void write_report_line(const fs::path& report, const RetrievalResult& res,
                       const std::string& command) {
  fs::create_directories(report.parent_path().empty() ? "." : report.parent_path());
  std::ofstream f(report, std::ios::app);
  if (!f) fail(ErrorKind::Io, "cannot append to report " + report.string());
  json j{{"protocol", res.protocol},
         {"R1", res.rank_k.at(1)},
         {"R5", res.rank_k.at(5)},
         {"R10", res.rank_k.at(10)},
         {"mAP", res.mean_ap},
         {"lambda_s", res.lambda_s},
         {"checkpoint_id", res.checkpoint_id},
         {"config_hash", res.config_hash},
         {"seed", res.seed},
         {"command", command}};
  f << j.dump() << "\n";
  std::cout << j.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attention-guided dual-encoder cross-modal retrieval toolkit"};
  app.require_subcommand(1);
  const std::string command_line = join_command(argc, argv);

  // ---- gen-data ----
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic paired image/caption corpus");
  SyntheticConfig syn;
  std::string gen_out = "data";
  std::uint64_t gen_seed = 1;
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--seed", gen_seed, "generation seed");
  gen->add_option("--ids", syn.identity_count, "identity count");
  gen->add_option("--images-per-id", syn.images_per_identity, "images per identity");
  gen->add_option("--captions-per-image", syn.captions_per_image, "captions per image");
  gen->add_option("--image-h", syn.image_h, "image height");
  gen->add_option("--image-w", syn.image_w, "image width");
  gen->add_option("--domain", syn.domain_tag, "domain tag");
  gen->add_option("--palette", syn.background_palette, "background palette index");
  gen->add_option("--noise", syn.background_noise, "background noise amplitude");
  gen->add_option("--figure-scale", syn.figure_scale, "figure scale");
  gen->add_option("--train-frac", syn.train_fraction, "train identity fraction");
  gen->add_option("--val-frac", syn.val_fraction, "val identity fraction");
  gen->add_flag("--verbose-captions", syn.verbose_captions, "longer caption grammar");

  // ---- train ----
  auto* train = app.add_subcommand("train", "train a model on a dataset manifest");
  std::string train_config_path, train_data, train_out = "run", resume_path;
  RunConfig overrides;  // flag targets; merged over file config below
  bool no_grab = false;
  bool flat_lr = false;
  train->add_option("--config", train_config_path, "run config JSON (flags override it)");
  train->add_option("--data", train_data, "train dataset manifest");
  train->add_option("--out", train_out, "run output directory");
  train->add_option("--resume", resume_path, "checkpoint base to resume from");
  auto* opt_seed = train->add_option("--seed", overrides.seed, "training seed");
  auto* opt_epochs = train->add_option("--epochs", overrides.optim.epochs, "epoch count");
  auto* opt_batch = train->add_option("--batch", overrides.optim.batch_size, "batch size");
  auto* opt_lr = train->add_option("--lr", overrides.optim.learning_rate, "learning rate");
  auto* opt_layers = train->add_option("--mars-layers", overrides.mars.layer_spec,
                                       "layer set: e/m/l combos, single:<i>, or indices");
  auto* opt_strategy = train->add_option("--mars-strategy", overrides.mars.strategy,
                                         "mars or baseline A-D");
  auto* opt_discard = train->add_option("--discard", overrides.mars.discard_ratio,
                                        "attention discard ratio");
  auto* opt_beta = train->add_option("--diversity-beta", overrides.mars.diversity_beta,
                                     "redundancy penalty for selection");
  auto* opt_rho_s = train->add_option("--rho-start", overrides.ats.rho_start, "ATS start ratio");
  auto* opt_rho_e = train->add_option("--rho-end", overrides.ats.rho_end, "ATS end ratio");
  auto* opt_gran = train->add_option("--ats-granularity", overrides.ats.granularity,
                                     "step or epoch");
  auto* opt_horizon = train->add_option("--ats-horizon", overrides.ats.horizon_override,
                                        "explicit schedule horizon");
  auto* opt_temp = train->add_option("--temperature", overrides.loss.temperature,
                                     "loss temperature");
  auto* opt_margin = train->add_option("--margin", overrides.loss.margin, "triplet margin");
  auto* opt_lambda = train->add_option("--lambda", overrides.loss.lambda_s, "fusion weight");
  auto* opt_ckpt_every = train->add_option("--checkpoint-every", overrides.checkpoint_every,
                                           "epochs between checkpoints");
  train->add_flag("--no-grab", no_grab, "train the global-only baseline");
  train->add_flag("--flat-lr", flat_lr, "disable the cosine learning-rate schedule");

  // ---- eval ----
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset manifest");
  std::string eval_ckpt, eval_data, eval_report, lambda_sweep;
  double eval_lambda = -1.0;
  std::string eval_split = "test";
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint base path")->required();
  eval->add_option("--data", eval_data, "dataset manifest")->required();
  eval->add_option("--lambda", eval_lambda, "fusion weight (defaults to the config value)");
  eval->add_option("--lambda-sweep", lambda_sweep, "comma-separated fusion weights");
  eval->add_option("--split", eval_split, "dataset split to evaluate");
  eval->add_option("--report", eval_report, "metrics report path (JSONL, appended)");

  // ---- diagnose ----
  auto* diag = app.add_subcommand("diagnose", "entropy / retention / schedule diagnostics");
  std::vector<std::string> diag_ckpts;
  std::string diag_data, diag_mode = "schedule", diag_out, diag_mask = "pixel";
  diag->add_option("--checkpoint", diag_ckpts, "checkpoint base path(s)")->required();
  diag->add_option("--data", diag_data, "dataset manifest (entropy/retention modes)");
  diag->add_option("--mode", diag_mode, "entropy | retention | schedule");
  diag->add_option("--out", diag_out, "output table path (TSV)");
  diag->add_option("--mask-mode", diag_mask, "pixel | token (retention mode)");

  // ---- export-overlays ----
  auto* overlays = app.add_subcommand("export-overlays", "render selected patches and tokens");
  std::string ov_ckpt, ov_data, ov_out = "overlays";
  int ov_count = 8;
  overlays->add_option("--checkpoint", ov_ckpt, "checkpoint base path")->required();
  overlays->add_option("--data", ov_data, "dataset manifest")->required();
  overlays->add_option("--count", ov_count, "number of samples to export");
  overlays->add_option("--out", ov_out, "output directory");

  // ---- convert ----
  auto* convert = app.add_subcommand("convert", "convert external annotations to a manifest");
  std::string conv_in, conv_out = "converted_manifest.jsonl", conv_domain = "external";
  convert->add_option("--annotations", conv_in, "annotation JSON file")->required();
  convert->add_option("--out", conv_out, "manifest output path");
  convert->add_option("--domain", conv_domain, "domain tag for the converted records");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const fs::path out = resolve_output(gen_out);
      DatasetManifest m = generate_synthetic(syn, gen_seed, out);
      std::cout << "wrote " << m.records.size() << " records to " << (out / "manifest.jsonl")
                << "\n";
      return 0;
    }

    if (*train) {
      RunConfig cfg;
      if (!train_config_path.empty()) cfg = load_run_config(train_config_path);
      if (!train_data.empty()) cfg.train_manifest = train_data;
      cfg.output_dir = resolve_output(train_out).string();
      if (*opt_seed) cfg.seed = overrides.seed;
      if (*opt_epochs) cfg.optim.epochs = overrides.optim.epochs;
      if (*opt_batch) cfg.optim.batch_size = overrides.optim.batch_size;
      if (*opt_lr) cfg.optim.learning_rate = overrides.optim.learning_rate;
      if (*opt_layers) cfg.mars.layer_spec = overrides.mars.layer_spec;
      if (*opt_strategy) cfg.mars.strategy = overrides.mars.strategy;
      if (*opt_discard) cfg.mars.discard_ratio = overrides.mars.discard_ratio;
      if (*opt_beta) cfg.mars.diversity_beta = overrides.mars.diversity_beta;
      if (*opt_rho_s) cfg.ats.rho_start = overrides.ats.rho_start;
      if (*opt_rho_e) cfg.ats.rho_end = overrides.ats.rho_end;
      if (*opt_gran) cfg.ats.granularity = overrides.ats.granularity;
      if (*opt_horizon) cfg.ats.horizon_override = overrides.ats.horizon_override;
      if (*opt_temp) cfg.loss.temperature = overrides.loss.temperature;
      if (*opt_margin) cfg.loss.margin = overrides.loss.margin;
      if (*opt_lambda) cfg.loss.lambda_s = overrides.loss.lambda_s;
      if (*opt_ckpt_every) cfg.checkpoint_every = overrides.checkpoint_every;
      if (no_grab) cfg.use_grab = false;
      if (flat_lr) cfg.optim.cosine_schedule = false;
      if (cfg.train_manifest.empty()) fail(ErrorKind::Config, "train needs --data or a config");

      Dataset dataset = load_dataset(cfg.train_manifest);
      cfg.text.vocab_size = dataset.manifest.vocab.size();
      validate_run_config(cfg);

      std::unique_ptr<Model> model;
      const fs::path run_dir = cfg.output_dir;
      if (!resume_path.empty()) {
        const fs::path resume = resume_path;
        model = load_model_for_resume(resume, cfg);
        TrainStats stats = train_model(*model, dataset, run_dir, &resume);
        std::cout << "resumed; final checkpoint " << stats.final_checkpoint << "\n";
      } else {
        model = build_model(cfg, cfg.text.vocab_size, train_identities(dataset));
        model->train_domain = dataset.manifest.domain_tag;
        TrainStats stats = train_model(*model, dataset, run_dir);
        std::cout << "trained " << model->step << " steps; final loss " << stats.final_loss
                  << "; checkpoint " << stats.final_checkpoint << "\n";
      }
      return 0;
    }

    if (*eval) {
      auto model = load_model(eval_ckpt);
      Dataset dataset = load_dataset(eval_data);
      const std::uint64_t checksum_before = model->graph.value_checksum();
      std::vector<double> lambdas;
      if (!lambda_sweep.empty()) {
        lambdas = parse_lambda_sweep(lambda_sweep);
      } else {
        lambdas = {eval_lambda >= 0.0 ? eval_lambda : model->config.loss.lambda_s};
      }
      fs::path report = eval_report.empty()
                            ? fs::path(eval_ckpt).parent_path() / "metrics_report.jsonl"
                            : resolve_output(eval_report);
      for (double lam : lambdas) {
        EvalOptions options;
        options.lambda_s = lam;
        options.split = eval_split;
        RetrievalResult res = evaluate_model(*model, dataset, options);
        write_report_line(report, res, command_line);
      }
      if (model->graph.value_checksum() != checksum_before) {
        fail(ErrorKind::Contract, "evaluation modified model parameters");
      }
      return 0;
    }

    if (*diag) {
      std::ostream* out = &std::cout;
      std::ofstream file;
      if (!diag_out.empty()) {
        const fs::path p = resolve_output(diag_out);
        if (!p.parent_path().empty()) fs::create_directories(p.parent_path());
        file.open(p, std::ios::trunc);
        if (!file) fail(ErrorKind::Io, "cannot write " + p.string());
        out = &file;
      }
      if (diag_mode == "schedule") {
        auto model = load_model(diag_ckpts.at(0));
        const RetentionSchedule base = model->schedule_base(1, 1);
        const RetentionSchedule img = with_token_count(base, model->config.visual.num_patches());
        const RetentionSchedule txt =
            with_token_count(base, model->config.text.content_capacity());
        *out << "# config_hash\t" << config_hash(model->config) << "\tseed\t"
             << model->config.seed << "\n";
        *out << "t\tk_image\tk_text\n";
        const std::int64_t horizon = base.horizon;
        const std::int64_t stride = std::max<std::int64_t>(1, horizon / 200);
        for (std::int64_t t = 0; t <= horizon + horizon / 5 + 1; t += stride) {
          *out << t << "\t" << budget_at(img, t) << "\t" << budget_at(txt, t) << "\n";
        }
      } else if (diag_mode == "entropy") {
        if (diag_data.empty()) fail(ErrorKind::Config, "entropy mode needs --data");
        Dataset dataset = load_dataset(diag_data);
        *out << "epoch\tlayer\tmean_entropy\tconfig_hash\tseed\n";
        for (const auto& ckpt : diag_ckpts) {
          auto model = load_model(ckpt);
          const auto entropy = image_attention_entropy(*model, dataset, "test", 32);
          for (size_t l = 0; l < entropy.size(); ++l) {
            *out << model->epoch << "\t" << l << "\t" << entropy[l] << "\t"
                 << config_hash(model->config) << "\t" << model->config.seed << "\n";
          }
        }
      } else if (diag_mode == "retention") {
        if (diag_data.empty()) fail(ErrorKind::Config, "retention mode needs --data");
        Dataset dataset = load_dataset(diag_data);
        const MaskMode mode = diag_mask == "token" ? MaskMode::Token : MaskMode::Pixel;
        *out << "epoch\tratio\tgap_pp\tconfig_hash\tseed\n";
        for (const auto& ckpt : diag_ckpts) {
          auto model = load_model(ckpt);
          EvalOptions options;
          options.lambda_s = model->config.loss.lambda_s;
          for (double ratio : {0.25, 0.5, 0.65, 0.8}) {
            const double gap = retention_gap(*model, dataset, ratio, options, mode);
            *out << model->epoch << "\t" << ratio << "\t" << gap << "\t"
                 << config_hash(model->config) << "\t" << model->config.seed << "\n";
          }
        }
      } else {
        fail(ErrorKind::Config, "unknown diagnose mode '" + diag_mode + "'");
      }
      return 0;
    }

    if (*overlays) {
      auto model = load_model(ov_ckpt);
      Dataset dataset = load_dataset(ov_data);
      const auto results = export_overlays(*model, dataset, ov_count, resolve_output(ov_out));
      std::cout << "wrote " << results.size() << " overlays to " << resolve_output(ov_out) << "\n";
      return 0;
    }

    if (*convert) {
      DatasetManifest m = convert_annotations(conv_in, conv_domain);
      save_manifest(m, resolve_output(conv_out));
      std::cout << "converted " << m.records.size() << " records\n";
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
