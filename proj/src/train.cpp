#include "mlkd/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mlkd {

namespace {

constexpr int64_t kEvalBatch = 64;

std::string fmt(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, p);
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

Tensor<float> batch_inputs(const Dataset& ds, const std::vector<int64_t>& order, int64_t begin,
                           int64_t end, AugmentMode mode, Rng* aug_rng) {
  int64_t n = end - begin;
  int64_t g = ds.grid_size();
  auto x = Tensor<float>::zeros({n, ds.spec.height, ds.spec.width, ds.spec.channels});
  for (int64_t i = 0; i < n; ++i) {
    const float* src = ds.grid(order[begin + i]);
    if (aug_rng && mode != AugmentMode::none) {
      auto view = augment(src, ds.spec, mode, *aug_rng);
      std::copy(view.begin(), view.end(), x.value().begin() + i * g);
    } else {
      std::copy(src, src + g, x.value().begin() + i * g);
    }
  }
  return x;
}

Tensor<float> batch_labels(const Dataset& ds, const std::vector<int64_t>& order, int64_t begin,
                           int64_t end) {
  int64_t n = end - begin;
  int64_t q = ds.spec.classes;
  auto y = Tensor<float>::zeros({n, q});
  for (int64_t i = 0; i < n; ++i) {
    const uint8_t* row = ds.label_row(order[begin + i]);
    for (int64_t k = 0; k < q; ++k) y.value()[i * q + k] = static_cast<float>(row[k]);
  }
  return y;
}

LossBreakdown<float> step_loss(const Model<float>::Output& student,
                               const Model<float>::Output* teacher, const Tensor<float>& y,
                               LossSelection selection, const DistillConfig& dcfg) {
  LossBreakdown<float> bd;
  switch (selection) {
    case LossSelection::vanilla: {
      bd.total = bce_loss(student.probabilities, y);
      bd.bce = static_cast<double>(bd.total.item());
      return bd;
    }
    case LossSelection::mld:
    case LossSelection::l2d: {
      DistillConfig d = dcfg;
      if (selection == LossSelection::mld) {
        d.lambda_cd = 0;
        d.lambda_id = 0;
      }
      return l2d_loss(student.probabilities, y, teacher->probabilities, teacher->embeddings,
                      student.embeddings, d);
    }
    case LossSelection::mse: {
      Tensor<float> bce = bce_loss(student.probabilities, y);
      bd.bce = static_cast<double>(bce.item());
      Tensor<float> term = mse_baseline(teacher->logits, student.logits);
      bd.baseline = static_cast<double>(term.item());
      bd.total = add(bce, term);
      return bd;
    }
    case LossSelection::ps: {
      Tensor<float> bce = bce_loss(student.probabilities, y);
      bd.bce = static_cast<double>(bce.item());
      Tensor<float> term = ps_baseline(teacher->logits, student.logits, y,
                                       static_cast<float>(dcfg.ps_temperature));
      bd.baseline = static_cast<double>(term.item());
      bd.total = add(bce, term);
      return bd;
    }
  }
  throw ConfigError("unknown loss selection");
}

TrainResult run_training(const Dataset& train, const Dataset& test, ModelConfig mcfg,
                         TrainConfig cfg, const Model<float>* teacher) {
  cfg.validate();
  bool needs_teacher = cfg.loss != LossSelection::vanilla;
  if (needs_teacher && !teacher)
    throw ConfigError("distill: loss " + to_string(cfg.loss) + " requires a teacher");
  if (teacher && teacher->config().classes != mcfg.classes)
    throw ConfigError("distill: teacher has " + std::to_string(teacher->config().classes) +
                      " classes, student " + std::to_string(mcfg.classes));
  if (train.spec.classes != mcfg.classes)
    throw ConfigError("train: dataset has " + std::to_string(train.spec.classes) +
                      " classes, model " + std::to_string(mcfg.classes));

  mcfg.seed = derive_seed(cfg.seed, "model-init");
  mcfg.validate();
  Model<float> model(mcfg);
  model.set_trainable(true);

  int64_t steps_per_epoch = train.count / cfg.batch_size;  // last incomplete batch dropped
  if (steps_per_epoch < 1) throw ConfigError("train: dataset smaller than one batch");
  int64_t total_steps = steps_per_epoch * cfg.epochs;
  OneCycleSchedule sched{total_steps, cfg.max_lr, cfg.warmup_frac, cfg.div, cfg.final_div};
  AdamState<float> adam = AdamState<float>::init(model.params());

  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  Rng aug_rng(derive_seed(cfg.seed, "augment"));
  Rng teacher_aug_rng(derive_seed(cfg.seed, "augment-teacher"));

  std::ostringstream history;
  history << "step,lr,L_BCE,L_MLD,L_CD,L_ID,total,L_BASE\n";
  std::ostringstream epochs_csv;
  epochs_csv << "epoch,mean_loss,val_map,val_of1,val_cf1\n";

  std::vector<int64_t> order(train.count);
  std::iota(order.begin(), order.end(), 0);

  TrainResult res;
  res.model_config = mcfg;
  double best_map = -1.0;
  int64_t step = 0;

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    for (int64_t s = 0; s < steps_per_epoch; ++s) {
      int64_t begin = s * cfg.batch_size;
      int64_t end = begin + cfg.batch_size;
      Tensor<float> x = batch_inputs(train, order, begin, end, cfg.augment, &aug_rng);
      Tensor<float> y = batch_labels(train, order, begin, end);

      Model<float>::Output tout;
      if (needs_teacher && teacher != nullptr) {
        if (cfg.independent_views) {
          Tensor<float> xt = batch_inputs(train, order, begin, end, cfg.augment,
                                          &teacher_aug_rng);
          tout = teacher->forward(xt);
        } else {
          tout = teacher->forward(x);  // identical augmented view
        }
      }
      Model<float>::Output sout = model.forward(x);

      double lr = sched.lr_at(step);
      LossBreakdown<float> bd =
          step_loss(sout, needs_teacher ? &tout : nullptr, y, cfg.loss, cfg.distill);
      double total = static_cast<double>(bd.total.item());
      if (!std::isfinite(total))
        throw NumericError("train: non-finite loss at step " + std::to_string(step) +
                           " (bce=" + fmt(bd.bce) + " mld=" + fmt(bd.mld) + " cd=" + fmt(bd.cd) +
                           " id=" + fmt(bd.id) + " base=" + fmt(bd.baseline) + ")");
      backward(bd.total);
      adam_step(model.params(), adam, lr, cfg.weight_decay);
      model.zero_grads();

      history << step << "," << fmt(lr) << "," << fmt(bd.bce) << "," << fmt(bd.mld) << ","
              << fmt(bd.cd) << "," << fmt(bd.id) << "," << fmt(total) << "," << fmt(bd.baseline)
              << "\n";
      loss_sum += total;
      ++step;
    }

    MetricsReport rep = evaluate(model, test);
    EpochStats es;
    es.epoch = epoch;
    es.mean_loss = loss_sum / static_cast<double>(steps_per_epoch);
    es.val_map = rep.map;
    es.val_of1 = rep.of1;
    es.val_cf1 = rep.cf1;
    res.epochs.push_back(es);
    epochs_csv << epoch << "," << fmt(es.mean_loss) << "," << fmt(rep.map) << "," << fmt(rep.of1)
               << "," << fmt(rep.cf1) << "\n";

    if (rep.map > best_map) {
      best_map = rep.map;
      res.best_epoch = epoch;
      res.best_metrics = rep;
      res.best_params.clear();
      for (const auto& [name, p] : model.params())
        res.best_params.emplace_back(p.value().begin(), p.value().end());
    }
  }

  res.history_csv = history.str();
  res.epochs_csv = epochs_csv.str();
  return res;
}

}  // namespace

LossSelection loss_selection_from_string(const std::string& s) {
  if (s == "vanilla") return LossSelection::vanilla;
  if (s == "mld") return LossSelection::mld;
  if (s == "l2d") return LossSelection::l2d;
  if (s == "mse") return LossSelection::mse;
  if (s == "ps") return LossSelection::ps;
  throw ConfigError("unknown loss selection: " + s);
}

std::string to_string(LossSelection s) {
  switch (s) {
    case LossSelection::vanilla: return "vanilla";
    case LossSelection::mld: return "mld";
    case LossSelection::l2d: return "l2d";
    case LossSelection::mse: return "mse";
    case LossSelection::ps: return "ps";
  }
  return "vanilla";
}

Model<float> TrainResult::build_model() const {
  Model<float> m(model_config);
  if (best_params.size() != m.params().size())
    throw ConfigError("train result: parameter snapshot does not match config");
  for (size_t i = 0; i < best_params.size(); ++i)
    m.params()[i].second.value().assign(best_params[i].begin(), best_params[i].end());
  return m;
}

TrainResult train_teacher(const Dataset& train, const Dataset& test, ModelConfig model_cfg,
                          TrainConfig cfg) {
  if (cfg.loss != LossSelection::vanilla)
    throw ConfigError("train_teacher: loss selection must be vanilla");
  return run_training(train, test, std::move(model_cfg), std::move(cfg), nullptr);
}

TrainResult distill_student(const Model<float>& teacher, const Dataset& train,
                            const Dataset& test, ModelConfig student_cfg, TrainConfig cfg) {
  return run_training(train, test, std::move(student_cfg), std::move(cfg), &teacher);
}

std::vector<double> eval_probabilities(const Model<float>& model, const Dataset& ds) {
  int64_t q = ds.spec.classes;
  std::vector<double> probs(ds.count * q);
  std::vector<int64_t> order(ds.count);
  std::iota(order.begin(), order.end(), 0);
  for (int64_t begin = 0; begin < ds.count; begin += kEvalBatch) {
    int64_t end = std::min(ds.count, begin + kEvalBatch);
    Tensor<float> x = batch_inputs(ds, order, begin, end, AugmentMode::none, nullptr);
    auto out = model.forward(x);
    for (int64_t i = 0; i < end - begin; ++i)
      for (int64_t k = 0; k < q; ++k)
        probs[(begin + i) * q + k] = static_cast<double>(out.probabilities.value()[i * q + k]);
  }
  return probs;
}

MetricsReport evaluate(const Model<float>& model, const Dataset& ds, double threshold,
                       bool with_correlation) {
  if (model.config().classes != ds.spec.classes)
    throw ConfigError("evaluate: model classes do not match dataset");
  auto probs = eval_probabilities(model, ds);
  return compute_metrics(probs, ds.labels, ds.count, ds.spec.classes, threshold,
                         with_correlation);
}

Pooling pooling_from_string(const std::string& s) {
  if (s == "mean") return Pooling::mean;
  if (s == "max") return Pooling::max;
  throw ConfigError("unknown pooling: " + s);
}

std::vector<double> pooled_embeddings(const Model<float>& model, const Dataset& ds,
                                      Pooling pool) {
  int64_t q = ds.spec.classes;
  int64_t d = model.config().embed_dim;
  std::vector<double> out(ds.count * d);
  std::vector<int64_t> order(ds.count);
  std::iota(order.begin(), order.end(), 0);
  for (int64_t begin = 0; begin < ds.count; begin += kEvalBatch) {
    int64_t end = std::min(ds.count, begin + kEvalBatch);
    Tensor<float> x = batch_inputs(ds, order, begin, end, AugmentMode::none, nullptr);
    auto embs = model.encode_label_embeddings(model.backbone_forward(x));
    for (int64_t i = 0; i < end - begin; ++i)
      for (int64_t j = 0; j < d; ++j) {
        double v;
        if (pool == Pooling::mean) {
          v = 0.0;
          for (int64_t k = 0; k < q; ++k)
            v += static_cast<double>(embs.value()[(i * q + k) * d + j]);
          v /= static_cast<double>(q);
        } else {
          v = static_cast<double>(embs.value()[(i * q) * d + j]);
          for (int64_t k = 1; k < q; ++k)
            v = std::max(v, static_cast<double>(embs.value()[(i * q + k) * d + j]));
        }
        out[(begin + i) * d + j] = v;
      }
  }
  return out;
}

AblationResult run_ablation(const Model<float>& teacher, const Dataset& train,
                            const Dataset& test, const ModelConfig& student_cfg,
                            const TrainConfig& base, const std::vector<uint64_t>& seeds,
                            const RunObserver& observer) {
  if (seeds.empty()) throw ConfigError("ablation: need at least one seed");
  AblationResult result;
  result.seeds = seeds;
  const bool flags[5][3] = {
      {false, false, false}, {true, false, false}, {true, true, false},
      {true, false, true},   {true, true, true},
  };
  for (size_t r = 0; r < 5; ++r) {
    AblationRow row;
    row.mld = flags[r][0];
    row.cd = flags[r][1];
    row.id = flags[r][2];
    for (uint64_t seed : seeds) {
      TrainConfig cfg = base;
      cfg.seed = seed;
      if (!row.mld) {
        cfg.loss = LossSelection::vanilla;
      } else {
        cfg.loss = LossSelection::l2d;
        if (!row.cd) cfg.distill.lambda_cd = 0;
        if (!row.id) cfg.distill.lambda_id = 0;
      }
      TrainResult tr = cfg.loss == LossSelection::vanilla
                           ? train_teacher(train, test, student_cfg, cfg)
                           : distill_student(teacher, train, test, student_cfg, cfg);
      row.map.push_back(tr.best_metrics.map);
      row.of1.push_back(tr.best_metrics.of1);
      row.cf1.push_back(tr.best_metrics.cf1);
      if (observer) observer(r, seed, tr);
    }
    result.rows.push_back(std::move(row));
  }
  return result;
}

std::string AblationResult::csv() const {
  std::ostringstream os;
  os << "mld,cd,id,map_mean,map_std,of1_mean,of1_std,cf1_mean,cf1_std\n";
  for (const auto& row : rows) {
    os << (row.mld ? "x" : "") << "," << (row.cd ? "x" : "") << "," << (row.id ? "x" : "") << ","
       << fmt(mean_of(row.map)) << "," << fmt(sample_std(row.map)) << "," << fmt(mean_of(row.of1))
       << "," << fmt(sample_std(row.of1)) << "," << fmt(mean_of(row.cf1)) << ","
       << fmt(sample_std(row.cf1)) << "\n";
  }
  return os.str();
}

SweepResult run_sweep(const Model<float>& teacher, const Dataset& train, const Dataset& test,
                      const ModelConfig& student_cfg, const TrainConfig& base,
                      const std::string& parameter, const std::vector<double>& values,
                      const RunObserver& observer) {
  if (values.empty()) throw ConfigError("sweep: need at least one value");
  for (double v : values)
    if (!(v > 0) || !std::isfinite(v))
      throw ConfigError("sweep: values must be positive and finite");
  SweepResult result;
  result.parameter = parameter;
  for (size_t i = 0; i < values.size(); ++i) {
    TrainConfig cfg = base;
    cfg.loss = LossSelection::l2d;
    if (parameter == "lambda_mld")
      cfg.distill.lambda_mld = values[i];
    else if (parameter == "lambda_cd")
      cfg.distill.lambda_cd = values[i];
    else if (parameter == "lambda_id")
      cfg.distill.lambda_id = values[i];
    else
      throw ConfigError("sweep: unknown parameter " + parameter +
                        " (expected lambda_mld|lambda_cd|lambda_id)");
    TrainResult tr = distill_student(teacher, train, test, student_cfg, cfg);
    result.points.push_back(
        {values[i], tr.best_metrics.map, tr.best_metrics.of1, tr.best_metrics.cf1});
    if (observer) observer(i, cfg.seed, tr);
  }
  return result;
}

std::string SweepResult::csv() const {
  std::ostringstream os;
  os << parameter << ",map,of1,cf1\n";
  for (const auto& p : points)
    os << fmt(p.value) << "," << fmt(p.map) << "," << fmt(p.of1) << "," << fmt(p.cf1) << "\n";
  return os.str();
}

nlohmann::ordered_json train_config_to_json(const TrainConfig& cfg) {
  nlohmann::ordered_json j;
  j["batch_size"] = cfg.batch_size;
  j["epochs"] = cfg.epochs;
  j["max_lr"] = cfg.max_lr;
  j["weight_decay"] = cfg.weight_decay;
  j["warmup_frac"] = cfg.warmup_frac;
  j["div"] = cfg.div;
  j["final_div"] = cfg.final_div;
  j["seed"] = cfg.seed;
  j["augment"] = to_string(cfg.augment);
  j["loss"] = to_string(cfg.loss);
  j["independent_views"] = cfg.independent_views;
  nlohmann::ordered_json d;
  d["lambda_mld"] = cfg.distill.lambda_mld;
  d["lambda_cd"] = cfg.distill.lambda_cd;
  d["lambda_id"] = cfg.distill.lambda_id;
  d["baseline"] = cfg.distill.baseline == DistillConfig::Baseline::none
                      ? "none"
                      : (cfg.distill.baseline == DistillConfig::Baseline::mse ? "mse" : "ps");
  d["ps_temperature"] = cfg.distill.ps_temperature;
  d["normalize_pairs"] = cfg.distill.normalize_pairs;
  d["mean_normalize_distances"] = cfg.distill.mean_normalize_distances;
  d["l2_normalize_embeddings"] = cfg.distill.l2_normalize_embeddings;
  j["distill"] = std::move(d);
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.max_lr = j.value("max_lr", cfg.max_lr);
  cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
  cfg.warmup_frac = j.value("warmup_frac", cfg.warmup_frac);
  cfg.div = j.value("div", cfg.div);
  cfg.final_div = j.value("final_div", cfg.final_div);
  cfg.seed = j.value("seed", cfg.seed);
  if (j.contains("augment")) cfg.augment = augment_mode_from_string(j.at("augment"));
  if (j.contains("loss")) cfg.loss = loss_selection_from_string(j.at("loss"));
  cfg.independent_views = j.value("independent_views", false);
  if (j.contains("distill")) {
    const auto& d = j.at("distill");
    cfg.distill.lambda_mld = d.value("lambda_mld", cfg.distill.lambda_mld);
    cfg.distill.lambda_cd = d.value("lambda_cd", cfg.distill.lambda_cd);
    cfg.distill.lambda_id = d.value("lambda_id", cfg.distill.lambda_id);
    if (d.contains("baseline")) cfg.distill.baseline = baseline_from_string(d.at("baseline"));
    cfg.distill.ps_temperature = d.value("ps_temperature", cfg.distill.ps_temperature);
    cfg.distill.normalize_pairs = d.value("normalize_pairs", cfg.distill.normalize_pairs);
    cfg.distill.mean_normalize_distances =
        d.value("mean_normalize_distances", cfg.distill.mean_normalize_distances);
    cfg.distill.l2_normalize_embeddings =
        d.value("l2_normalize_embeddings", cfg.distill.l2_normalize_embeddings);
  }
  cfg.validate();
  return cfg;
}

}  // namespace mlkd
