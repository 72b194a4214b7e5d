#include "cmret/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "cmret/error.hpp"
#include "cmret/hashutil.hpp"
#include "cmret/objectives.hpp"

namespace cmret {

using nlohmann::json;

namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

struct PairRef {
  int record;
  int caption;
};

std::vector<PairRef> train_pairs(const Dataset& dataset) {
  std::vector<PairRef> pairs;
  for (int idx : dataset.split_indices("train")) {
    const auto& rec = dataset.manifest.records[static_cast<size_t>(idx)];
    for (int c = 0; c < static_cast<int>(rec.captions.size()); ++c) pairs.push_back({idx, c});
  }
  return pairs;
}

// Adam with optional cosine decay of the base learning rate.
class Adam {
 public:
  Adam(const OptimConfig& cfg, Graph& graph) : cfg_(cfg) {
    for (const auto& [name, p] : graph.parameters()) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void step(Graph& graph, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    size_t pi = 0;
    for (auto& [name, p] : graph.parameters()) {
      auto& values = p.values();
      const auto& grad = p.grad();
      auto& m = m_[pi];
      auto& v = v_[pi];
      for (size_t i = 0; i < values.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * grad[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        values[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
      }
      p.round_to_dtype();
      ++pi;
    }
  }

  std::int64_t t() const { return t_; }
  void set_t(std::int64_t t) { t_ = t; }
  std::vector<Buffer>& m() { return m_; }
  std::vector<Buffer>& v() { return v_; }

 private:
  OptimConfig cfg_;
  std::vector<Buffer> m_, v_;
  std::int64_t t_{0};
};

double cosine_lr(double base, std::int64_t step, std::int64_t total, bool enabled) {
  if (!enabled || total <= 0) return base;
  const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return base * 0.5 * (1.0 + std::cos(progress * 3.14159265358979323846));
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

int Model::class_index_of(int identity) const {
  auto it = std::lower_bound(class_ids.begin(), class_ids.end(), identity);
  if (it == class_ids.end() || *it != identity) return -1;
  return static_cast<int>(it - class_ids.begin());
}

RetentionSchedule Model::schedule_base(std::int64_t total_steps, int steps_per_epoch) const {
  RetentionSchedule s;
  s.token_count = 1;  // per-modality override at use sites
  s.rho_start = config.ats.rho_start;
  s.rho_end = config.ats.rho_end;
  s.granularity = config.ats.granularity == "epoch" ? ScheduleGranularity::Epoch
                                                    : ScheduleGranularity::Step;
  if (config.ats.horizon_override > 0) {
    s.horizon = config.ats.horizon_override;
  } else if (s.granularity == ScheduleGranularity::Epoch) {
    s.horizon = std::max<std::int64_t>(
        1, static_cast<std::int64_t>(std::llround(config.optim.epochs * config.ats.horizon_fraction)));
  } else {
    s.horizon = std::max<std::int64_t>(
        1, static_cast<std::int64_t>(std::llround(static_cast<double>(total_steps) *
                                                  config.ats.horizon_fraction)));
  }
  (void)steps_per_epoch;
  return s;
}

std::unique_ptr<Model> build_model(const RunConfig& config, int vocab_size,
                                   std::vector<int> class_ids) {
  validate_run_config(config);
  auto model = std::make_unique<Model>();
  model->config = config;
  model->config.text.vocab_size = vocab_size;
  std::sort(class_ids.begin(), class_ids.end());
  class_ids.erase(std::unique(class_ids.begin(), class_ids.end()), class_ids.end());
  model->class_ids = std::move(class_ids);
  if (model->class_ids.empty()) fail(ErrorKind::Data, "model needs at least one identity class");

  std::mt19937_64 rng(mix(config.seed, 0xC0DE));
  model->image_encoder =
      std::make_unique<ImageEncoder>(model->config.visual, model->graph, "img", rng);
  model->text_encoder =
      std::make_unique<TextEncoder>(model->config.text, model->graph, "txt", rng);
  const int dim = model->config.visual.common.dim;
  model->grab = make_grab_params(model->graph, dim, model->config.visual.num_patches(),
                                 model->config.text.content_capacity(), rng);
  const int classes = static_cast<int>(model->class_ids.size());
  model->classifier = model->graph.add_parameter(
      "classifier", Tensor::randn({classes, dim}, rng, 1.0 / std::sqrt(dim)));
  return model;
}

namespace {

CheckpointMeta model_meta(const Model& model) {
  CheckpointMeta meta;
  meta.config_hash = config_hash(model.config);
  meta.config_json = to_json_string(model.config);
  meta.seed = model.config.seed;
  meta.step = model.step;
  meta.epoch = model.epoch;
  meta.extra["vocab_size"] = std::to_string(model.config.text.vocab_size);
  std::string ids;
  for (size_t i = 0; i < model.class_ids.size(); ++i) {
    if (i) ids += ',';
    ids += std::to_string(model.class_ids[i]);
  }
  meta.extra["class_ids"] = ids;
  meta.extra["train_domain"] = model.train_domain;
  return meta;
}

void save_model_checkpoint(const Model& model, Adam* adam,
                           const std::filesystem::path& base) {
  CheckpointMeta meta = model_meta(model);
  std::vector<std::pair<std::string, Tensor>> entries = model.graph.parameters();
  if (adam) {
    meta.extra["adam_t"] = std::to_string(adam->t());
    size_t pi = 0;
    for (const auto& [name, p] : model.graph.parameters()) {
      // f64 so a resumed run continues with the exact optimizer state
      Tensor m = Tensor::zeros(p.shape(), Dtype::f64);
      Tensor v = Tensor::zeros(p.shape(), Dtype::f64);
      std::copy(adam->m()[pi].begin(), adam->m()[pi].end(), m.values().begin());
      std::copy(adam->v()[pi].begin(), adam->v()[pi].end(), v.values().begin());
      entries.emplace_back("opt.m." + name, m);
      entries.emplace_back("opt.v." + name, v);
      ++pi;
    }
  }
  save_checkpoint(entries, meta, base);
}

void restore_optimizer(Adam& adam, const Model& model, const LoadedCheckpoint& ckpt) {
  auto find_entry = [&](const std::string& name) -> const Tensor* {
    for (const auto& [n, t] : ckpt.entries) {
      if (n == name) return &t;
    }
    return nullptr;
  };
  size_t pi = 0;
  for (const auto& [name, p] : model.graph.parameters()) {
    const Tensor* m = find_entry("opt.m." + name);
    const Tensor* v = find_entry("opt.v." + name);
    if (!m || !v) fail(ErrorKind::Version, "checkpoint lacks optimizer state for " + name);
    std::copy(m->values().begin(), m->values().end(), adam.m()[pi].begin());
    std::copy(v->values().begin(), v->values().end(), adam.v()[pi].begin());
    ++pi;
  }
  auto it = ckpt.meta.extra.find("adam_t");
  if (it == ckpt.meta.extra.end()) {
    fail(ErrorKind::Version, "checkpoint lacks the optimizer step counter");
  }
  adam.set_t(std::stoll(it->second));
}

struct BatchTensors {
  std::vector<Image> images;
  std::vector<std::vector<int>> captions;
  std::vector<int> class_labels;
};

BatchTensors assemble_batch(const Dataset& dataset, const Model& model,
                            const std::vector<PairRef>& pairs, size_t begin, size_t end,
                            std::mt19937_64& aug_rng, bool augment) {
  BatchTensors batch;
  for (size_t i = begin; i < end; ++i) {
    const auto& pr = pairs[i];
    const auto& rec = dataset.manifest.records[static_cast<size_t>(pr.record)];
    Image img = dataset.images[static_cast<size_t>(pr.record)];
    std::vector<int> caption = rec.captions[static_cast<size_t>(pr.caption)].token_ids;
    if (augment) {
      img = augment_image(img, model.config.image_aug, aug_rng);
      caption = augment_text(caption, model.config.text_aug, model.config.text.vocab_size, aug_rng);
    }
    batch.images.push_back(std::move(img));
    batch.captions.push_back(std::move(caption));
    const int cls = model.class_index_of(rec.identity);
    if (cls < 0) fail(ErrorKind::Data, "identity " + std::to_string(rec.identity) +
                                           " missing from the classifier classes");
    batch.class_labels.push_back(cls);
  }
  return batch;
}

}  // namespace

TrainStats train_model(Model& model, const Dataset& dataset,
                       const std::filesystem::path& run_dir,
                       const std::filesystem::path* resume_from,
                       const EpochCallback* on_epoch_end) {
  validate_run_config(model.config);
  std::filesystem::create_directories(run_dir);
  save_run_config(model.config, run_dir / "config_resolved.json");

  std::vector<PairRef> pairs = train_pairs(dataset);
  if (pairs.empty()) fail(ErrorKind::Data, "no train-split pairs in the dataset");

  const int batch_size = model.config.optim.batch_size;
  const int steps_per_epoch =
      static_cast<int>((pairs.size() + batch_size - 1) / static_cast<size_t>(batch_size));
  const std::int64_t total_steps =
      static_cast<std::int64_t>(steps_per_epoch) * model.config.optim.epochs;
  const RetentionSchedule schedule = model.schedule_base(total_steps, steps_per_epoch);

  Adam adam(model.config.optim, model.graph);
  int start_epoch = 0;
  if (resume_from) {
    restore_optimizer(adam, model, load_checkpoint(*resume_from));
    start_epoch = model.epoch;
  }

  TrainStats stats;
  stats.log_path = run_dir / "training_log.jsonl";
  std::ofstream log(stats.log_path, resume_from ? std::ios::app : std::ios::trunc);
  if (!log) fail(ErrorKind::Io, "cannot write training log " + stats.log_path.string());

  const std::string hash = config_hash(model.config);
  log << json{{"type", "header"},
              {"config_hash", hash},
              {"seed", model.config.seed},
              {"steps_per_epoch", steps_per_epoch},
              {"total_steps", total_steps},
              {"ats_horizon", schedule.horizon}}
             .dump()
      << "\n";

  double last_loss = 0.0;
  for (int epoch = start_epoch; epoch < model.config.optim.epochs; ++epoch) {
    model.epoch = epoch;
    std::mt19937_64 shuffle_rng(mix(model.config.seed, 1000 + static_cast<std::uint64_t>(epoch)));
    std::shuffle(pairs.begin(), pairs.end(), shuffle_rng);
    std::mt19937_64 aug_rng(mix(model.config.seed, 5000 + static_cast<std::uint64_t>(epoch)));

    for (size_t begin = 0; begin < pairs.size(); begin += static_cast<size_t>(batch_size)) {
      const size_t end = std::min(pairs.size(), begin + static_cast<size_t>(batch_size));
      BatchTensors batch = assemble_batch(dataset, model, pairs, begin, end, aug_rng, true);

      VisualBatch visuals = model.image_encoder->encode(batch.images);
      TextBatch texts = model.text_encoder->encode(batch.captions);

      Tensor global = pair_loss(visuals.globals, texts.globals, batch.class_labels,
                                model.classifier, model.config.loss);
      Tensor loss = global;
      double local_value = 0.0;
      int k_img = 0, k_txt = 0;
      if (model.config.use_grab) {
        const std::int64_t t = schedule.granularity == ScheduleGranularity::Epoch
                                   ? static_cast<std::int64_t>(epoch)
                                   : model.step;
        GrabOutput grab_out =
            grab_forward(visuals.items, texts.items, model.config.mars, t, schedule, model.grab,
                         model.config.loss, batch.class_labels, model.classifier);
        local_value = grab_out.local_loss.item();
        k_img = static_cast<int>(grab_out.banks[0].selected_image_indices.size());
        k_txt = static_cast<int>(grab_out.banks[0].selected_text_indices.size());
        loss = add(global, grab_out.local_loss);
      }

      const double loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        fail(ErrorKind::Numeric, "training loss is not finite at step " +
                                     std::to_string(model.step));
      }
      model.graph.zero_grad();
      backward(loss);
      const double lr = cosine_lr(model.config.optim.learning_rate, model.step, total_steps,
                                  model.config.optim.cosine_schedule);
      adam.step(model.graph, lr);

      log << json{{"type", "step"},
                  {"step", model.step},
                  {"epoch", epoch},
                  {"loss", format_double(loss_value)},
                  {"loss_global", format_double(global.item())},
                  {"loss_local", format_double(local_value)},
                  {"k_img", k_img},
                  {"k_txt", k_txt},
                  {"lr", format_double(lr)}}
                 .dump()
          << "\n";
      last_loss = loss_value;
      ++model.step;
    }

    model.epoch = epoch + 1;
    if (on_epoch_end) (*on_epoch_end)(model, epoch + 1);
    if (model.config.checkpoint_every > 0 && (epoch + 1) % model.config.checkpoint_every == 0 &&
        epoch + 1 < model.config.optim.epochs) {
      char name[32];
      std::snprintf(name, sizeof(name), "checkpoint_ep%04d", epoch + 1);
      const std::filesystem::path base = run_dir / name;
      save_model_checkpoint(model, &adam, base);
      stats.epoch_checkpoints.push_back(base);
    }
  }

  stats.final_checkpoint = run_dir / "checkpoint_final";
  save_model_checkpoint(model, &adam, stats.final_checkpoint);
  stats.epoch_checkpoints.push_back(stats.final_checkpoint);
  stats.final_loss = last_loss;
  return stats;
}

std::unique_ptr<Model> load_model(const std::filesystem::path& checkpoint_base) {
  LoadedCheckpoint ckpt = load_checkpoint(checkpoint_base);
  RunConfig config = run_config_from_json(ckpt.meta.config_json);
  if (config_hash(config) != ckpt.meta.config_hash) {
    fail(ErrorKind::Version, "checkpoint config hash does not match its stored config");
  }
  std::vector<int> class_ids;
  {
    const std::string& ids = ckpt.meta.extra.at("class_ids");
    size_t pos = 0;
    while (pos < ids.size()) {
      size_t comma = ids.find(',', pos);
      if (comma == std::string::npos) comma = ids.size();
      class_ids.push_back(std::stoi(ids.substr(pos, comma - pos)));
      pos = comma + 1;
    }
  }
  auto model = build_model(config, config.text.vocab_size, std::move(class_ids));
  restore_parameters(model->graph, ckpt);
  model->step = ckpt.meta.step;
  model->epoch = ckpt.meta.epoch;
  auto domain = ckpt.meta.extra.find("train_domain");
  if (domain != ckpt.meta.extra.end()) model->train_domain = domain->second;
  return model;
}

std::unique_ptr<Model> load_model_for_resume(const std::filesystem::path& checkpoint_base,
                                             const RunConfig& expected_config) {
  LoadedCheckpoint ckpt = load_checkpoint(checkpoint_base);
  if (ckpt.meta.config_hash != config_hash(expected_config)) {
    fail(ErrorKind::Version,
         "resume rejected: checkpoint config hash " + ckpt.meta.config_hash +
             " does not match the requested config " + config_hash(expected_config));
  }
  return load_model(checkpoint_base);
}

namespace {


void append_rows(Mat& dst, const Tensor& src) {
  const int cols = src.dim(1);
  if (dst.cols == 0) {
    dst.cols = cols;
  }
  const int old_rows = dst.rows;
  dst.rows += src.dim(0);
  dst.v.resize(static_cast<size_t>(dst.rows) * dst.cols);
  std::copy(src.values().begin(), src.values().end(),
            dst.v.begin() + static_cast<std::ptrdiff_t>(old_rows) * dst.cols);
}

// Guided local embedding of already-encoded items at the model's current
// schedule position.
Tensor guided_image_embedding(Model& model, const VisualEncoding& enc,
                              const RetentionSchedule& schedule, std::int64_t t) {
  const auto scores = visual_saliency(enc, model.config.mars);
  int finite = 0;
  for (double v : scores) finite += std::isfinite(v) ? 1 : 0;
  const int k = clamp_budget(budget_at(with_token_count(schedule, enc.locals.dim(0)), t), finite);
  const auto idx = model.config.mars.diversity_beta != 0.0
                       ? select_topk_diverse(scores, k,
                                             [&] {
                                               Mat m(enc.tokens.dim(0), enc.tokens.dim(1));
                                               std::copy(enc.tokens.values().begin(),
                                                         enc.tokens.values().end(), m.v.begin());
                                               return m;
                                             }(),
                                             model.config.mars.diversity_beta)
                       : select_topk(scores, k);
  Tensor bank = gather_rows(enc.tokens, idx);
  Tensor adapted = adapt(bank, model.grab.image_adapter);
  return l2_normalize_rows(gpo_pool(adapted, model.grab.image_gpo.logits));
}

Tensor guided_text_embedding(Model& model, const TextEncoding& enc,
                             const RetentionSchedule& schedule, std::int64_t t) {
  const auto scores = text_saliency(enc, model.config.mars);
  int finite = 0;
  for (double v : scores) finite += std::isfinite(v) ? 1 : 0;
  const int k = clamp_budget(budget_at(with_token_count(schedule, enc.locals.dim(0)), t), finite);
  const auto idx = select_topk(scores, k);
  Tensor bank = gather_rows(enc.tokens, idx);
  Tensor adapted = adapt(bank, model.grab.text_adapter);
  return l2_normalize_rows(gpo_pool(adapted, model.grab.text_gpo.logits));
}

std::int64_t eval_schedule_position(const Model& model, const RetentionSchedule& schedule) {
  return schedule.granularity == ScheduleGranularity::Epoch ? model.epoch : model.step;
}

EmbeddingTable encode_gallery(Model& model, const Dataset& dataset,
                              const std::vector<int>& record_indices,
                              const std::vector<Image>* images_override, int batch_size) {
  NoGradGuard ng;
  EmbeddingTable table;
  const RetentionSchedule schedule = model.schedule_base(1, 1);
  const std::int64_t t = eval_schedule_position(model, schedule);
  for (size_t begin = 0; begin < record_indices.size();
       begin += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(record_indices.size(), begin + static_cast<size_t>(batch_size));
    std::vector<Image> images;
    for (size_t i = begin; i < end; ++i) {
      images.push_back(images_override ? (*images_override)[i]
                                       : dataset.images[static_cast<size_t>(record_indices[i])]);
    }
    VisualBatch batch = model.image_encoder->encode(images);
    Tensor globals = l2_normalize_rows(batch.globals);
    append_rows(table.global, globals);
    if (model.config.use_grab) {
      std::vector<Tensor> locals;
      for (const auto& item : batch.items) {
        locals.push_back(guided_image_embedding(model, item, schedule, t));
      }
      append_rows(table.local, concat_rows(locals));
    } else {
      append_rows(table.local, globals);
    }
  }
  for (int idx : record_indices) {
    table.ids.push_back(dataset.manifest.records[static_cast<size_t>(idx)].identity);
  }
  return table;
}

EmbeddingTable encode_queries(Model& model, const Dataset& dataset,
                              const std::vector<int>& record_indices, int batch_size) {
  NoGradGuard ng;
  EmbeddingTable table;
  const RetentionSchedule schedule = model.schedule_base(1, 1);
  const std::int64_t t = eval_schedule_position(model, schedule);
  std::vector<std::vector<int>> captions;
  for (int idx : record_indices) {
    const auto& rec = dataset.manifest.records[static_cast<size_t>(idx)];
    for (const auto& cap : rec.captions) {
      captions.push_back(cap.token_ids);
      table.ids.push_back(rec.identity);
    }
  }
  for (size_t begin = 0; begin < captions.size(); begin += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(captions.size(), begin + static_cast<size_t>(batch_size));
    std::vector<std::vector<int>> chunk(captions.begin() + static_cast<std::ptrdiff_t>(begin),
                                        captions.begin() + static_cast<std::ptrdiff_t>(end));
    TextBatch batch = model.text_encoder->encode(chunk);
    Tensor globals = l2_normalize_rows(batch.globals);
    append_rows(table.global, globals);
    if (model.config.use_grab) {
      std::vector<Tensor> locals;
      for (const auto& item : batch.items) {
        locals.push_back(guided_text_embedding(model, item, schedule, t));
      }
      append_rows(table.local, concat_rows(locals));
    } else {
      append_rows(table.local, globals);
    }
  }
  return table;
}

}  // namespace

RetrievalResult evaluate_model(Model& model, const Dataset& dataset, const EvalOptions& options) {
  const std::vector<int> records = dataset.split_indices(options.split);
  if (records.empty()) {
    fail(ErrorKind::Protocol, "dataset has no '" + options.split + "' split records");
  }
  EmbeddingTable gallery = encode_gallery(model, dataset, records, nullptr, options.batch_size);
  EmbeddingTable queries = encode_queries(model, dataset, records, options.batch_size);
  RetrievalResult res = evaluate_embeddings(queries, gallery, options.lambda_s);
  res.protocol = model.train_domain + "->" + dataset.manifest.domain_tag;
  res.config_hash = config_hash(model.config);
  res.seed = model.config.seed;
  res.checkpoint_id = to_hex(model.graph.value_checksum());
  return res;
}

double retention_gap(Model& model, const Dataset& dataset, double retention_ratio,
                     const EvalOptions& options, MaskMode mode) {
  if (retention_ratio <= 0.0 || retention_ratio > 1.0) {
    fail(ErrorKind::Config, "retention ratio must lie in (0, 1]");
  }
  const std::vector<int> records = dataset.split_indices(options.split);
  if (records.empty()) {
    fail(ErrorKind::Protocol, "dataset has no '" + options.split + "' split records");
  }

  NoGradGuard ng;
  const int n = model.config.visual.num_patches();
  const int keep = std::max(1, static_cast<int>(std::floor(retention_ratio * n)));
  const int patch = model.config.visual.patch;
  const int grid_w = model.config.visual.grid_w();

  // Keep-masks from the last layer's [CLS] attention over patches.
  std::vector<Image> masked_images;
  std::vector<std::vector<bool>> token_keep;
  for (int idx : records) {
    const Image& img = dataset.images[static_cast<size_t>(idx)];
    VisualEncoding enc = model.image_encoder->encode_one(img);
    const Mat& last = enc.attn.layers.back();
    std::vector<double> scores(static_cast<size_t>(n));
    for (int p = 0; p < n; ++p) scores[static_cast<size_t>(p)] = last(0, 1 + p);
    const std::vector<int> kept = select_topk(scores, keep);
    std::vector<bool> keep_mask(static_cast<size_t>(n), false);
    for (int p : kept) keep_mask[static_cast<size_t>(p)] = true;

    if (mode == MaskMode::Pixel) {
      Image masked = img;
      for (int p = 0; p < n; ++p) {
        if (keep_mask[static_cast<size_t>(p)]) continue;
        const int gy = p / grid_w, gx = p % grid_w;
        fill_rect(masked, gy * patch, gx * patch, patch, patch, 0.0, 0.0, 0.0);
      }
      masked_images.push_back(std::move(masked));
    } else {
      token_keep.push_back(std::move(keep_mask));
      masked_images.push_back(img);
    }
  }

  EmbeddingTable queries = encode_queries(model, dataset, records, options.batch_size);
  EmbeddingTable gallery_plain =
      encode_gallery(model, dataset, records, nullptr, options.batch_size);
  EmbeddingTable gallery_masked;
  if (mode == MaskMode::Pixel) {
    gallery_masked = encode_gallery(model, dataset, records, &masked_images, options.batch_size);
  } else {
    // token mode: zero the kept-out patch embeddings inside the encoder
    gallery_masked = [&] {
      EmbeddingTable table;
      const RetentionSchedule schedule = model.schedule_base(1, 1);
      const std::int64_t t = eval_schedule_position(model, schedule);
      for (size_t i = 0; i < records.size(); ++i) {
        VisualEncoding enc = model.image_encoder->encode_one_masked(
            dataset.images[static_cast<size_t>(records[i])], token_keep[i]);
        Tensor global = l2_normalize_rows(enc.global);
        append_rows(table.global, global);
        if (model.config.use_grab) {
          append_rows(table.local, guided_image_embedding(model, enc, schedule, t));
        } else {
          append_rows(table.local, global);
        }
        table.ids.push_back(
            dataset.manifest.records[static_cast<size_t>(records[i])].identity);
      }
      return table;
    }();
  }

  RetrievalResult plain = evaluate_embeddings(queries, gallery_plain, options.lambda_s);
  RetrievalResult masked = evaluate_embeddings(queries, gallery_masked, options.lambda_s);
  return 100.0 * (plain.rank_k.at(1) - masked.rank_k.at(1));
}

std::vector<double> image_attention_entropy(Model& model, const Dataset& dataset,
                                            const std::string& split, int max_items) {
  NoGradGuard ng;
  std::vector<int> records = dataset.split_indices(split);
  if (records.empty()) fail(ErrorKind::Protocol, "dataset has no '" + split + "' split records");
  if (static_cast<int>(records.size()) > max_items) records.resize(static_cast<size_t>(max_items));

  const int layers = model.config.visual.common.layers;
  std::vector<double> entropy(static_cast<size_t>(layers), 0.0);
  const auto present = visual_present_mask(model.config.visual.seq_len());
  for (int idx : records) {
    VisualEncoding enc = model.image_encoder->encode_one(dataset.images[static_cast<size_t>(idx)]);
    for (int l = 0; l < layers; ++l) {
      entropy[static_cast<size_t>(l)] +=
          attention_entropy(enc.attn.layers[static_cast<size_t>(l)], present);
    }
  }
  for (auto& e : entropy) e /= static_cast<double>(records.size());
  return entropy;
}

std::vector<OverlayResult> export_overlays(Model& model, const Dataset& dataset, int count,
                                           const std::filesystem::path& out_dir) {
  NoGradGuard ng;
  std::vector<OverlayResult> results;
  if (count <= 0) return results;
  std::filesystem::create_directories(out_dir);

  const std::vector<int> records = dataset.split_indices("test");
  const RetentionSchedule schedule = model.schedule_base(1, 1);
  const std::int64_t t = eval_schedule_position(model, schedule);
  const int n = std::min<int>(count, static_cast<int>(records.size()));
  const std::string hash = config_hash(model.config);

  for (int i = 0; i < n; ++i) {
    const int idx = records[static_cast<size_t>(i)];
    const auto& rec = dataset.manifest.records[static_cast<size_t>(idx)];
    const Image& img = dataset.images[static_cast<size_t>(idx)];
    VisualEncoding enc = model.image_encoder->encode_one(img);
    const auto scores = visual_saliency(enc, model.config.mars);
    int finite = 0;
    for (double v : scores) finite += std::isfinite(v) ? 1 : 0;
    const int k =
        clamp_budget(budget_at(with_token_count(schedule, enc.locals.dim(0)), t), finite);
    const auto selected = select_topk(scores, k);

    Image overlay = img;
    for (int pos : selected) {
      const int p = pos - 1;  // attention position -> patch index
      outline_patch(overlay, p / model.config.visual.grid_w(), p % model.config.visual.grid_w(),
                    model.config.visual.patch, 1.0, 0.1, 0.1);
    }
    char name[64];
    std::snprintf(name, sizeof(name), "overlay_%04d.ppm", i);
    write_ppm(overlay, out_dir / name);

    OverlayResult res;
    res.image_path = out_dir / name;
    res.patch_indices = selected;

    // selected caption tokens for the first caption of the record
    TextEncoding txt = model.text_encoder->encode_one(rec.captions[0].token_ids);
    const auto t_scores = text_saliency(txt, model.config.mars);
    int t_finite = 0;
    for (double v : t_scores) t_finite += std::isfinite(v) ? 1 : 0;
    const int tk =
        clamp_budget(budget_at(with_token_count(schedule, txt.locals.dim(0)), t), t_finite);
    for (int pos : select_topk(t_scores, tk)) {
      res.caption_tokens.push_back(
          dataset.manifest.vocab.word_of(rec.captions[0].token_ids[static_cast<size_t>(pos - 1)]));
    }

    std::snprintf(name, sizeof(name), "overlay_%04d.txt", i);
    std::ofstream meta(out_dir / name, std::ios::trunc);
    meta << "image: " << rec.image_path << "\n";
    meta << "config_hash: " << hash << "\n";
    meta << "seed: " << model.config.seed << "\n";
    meta << "selected_patches:";
    for (int p : res.patch_indices) meta << ' ' << (p - 1);
    meta << "\nselected_tokens:";
    for (const auto& w : res.caption_tokens) meta << ' ' << w;
    meta << "\n";
    results.push_back(std::move(res));
  }
  return results;
}

}  // namespace cmret
