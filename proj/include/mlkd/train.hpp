#pragma once

// Training harness: teacher training, student distillation (including
// reversed capacity), evaluation, Table-style ablation and parameter sweeps.
// A (config, seed) pair replays bit-exact on one machine: model init,
// shuffling and augmentation all draw from streams derived from the run seed.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mlkd/checkpoint.hpp"
#include "mlkd/data.hpp"
#include "mlkd/losses.hpp"
#include "mlkd/metrics.hpp"
#include "mlkd/model.hpp"
#include "mlkd/optim.hpp"

namespace mlkd {

enum class LossSelection { vanilla, mld, l2d, mse, ps };

LossSelection loss_selection_from_string(const std::string& s);
std::string to_string(LossSelection s);

struct TrainConfig {
  int64_t batch_size = 32;
  int64_t epochs = 30;
  double max_lr = 3e-3;
  double weight_decay = 1e-4;
  double warmup_frac = 0.3;
  double div = 25.0;
  double final_div = 1e4;
  uint64_t seed = 1;
  AugmentMode augment = AugmentMode::weak;
  LossSelection loss = LossSelection::vanilla;
  DistillConfig distill;
  bool independent_views = false;  // teacher sees its own augmented view

  void validate() const {
    if (batch_size < 2) throw ConfigError("train: batch size must be >= 2 (CD needs pairs)");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (!(max_lr > 0) || !std::isfinite(max_lr)) throw ConfigError("train: bad max_lr");
    if (weight_decay < 0 || !std::isfinite(weight_decay))
      throw ConfigError("train: bad weight_decay");
    if (warmup_frac < 0 || warmup_frac >= 1) throw ConfigError("train: warmup_frac in [0,1)");
    if (!(div >= 1) || !(final_div >= 1)) throw ConfigError("train: div factors must be >= 1");
    distill.validate();
  }
};

struct EpochStats {
  int64_t epoch = 0;
  double mean_loss = 0.0;
  double val_map = 0.0;
  double val_of1 = 0.0;
  double val_cf1 = 0.0;
};

struct TrainResult {
  ModelConfig model_config;
  std::vector<std::vector<float>> best_params;  // best-validation-mAP snapshot
  MetricsReport best_metrics;
  int64_t best_epoch = 0;
  std::vector<EpochStats> epochs;
  std::string history_csv;  // step,lr,L_BCE,L_MLD,L_CD,L_ID,total,L_BASE
  std::string epochs_csv;   // epoch,mean_loss,val_map,val_of1,val_cf1

  Model<float> build_model() const;
};

/// Vanilla BCE training of one model (the teacher entry point).
TrainResult train_teacher(const Dataset& train, const Dataset& test, ModelConfig model_cfg,
                          TrainConfig cfg);

/// Distillation under a frozen teacher. With loss=vanilla this is bitwise
/// identical to train_teacher on the student config (degenerate distillation);
/// a smaller teacher than student runs the reversed setting unchanged.
TrainResult distill_student(const Model<float>& teacher, const Dataset& train,
                            const Dataset& test, ModelConfig student_cfg, TrainConfig cfg);

MetricsReport evaluate(const Model<float>& model, const Dataset& ds, double threshold = 0.5,
                       bool with_correlation = false);

/// Probabilities [n, q] of the full split, no augmentation.
std::vector<double> eval_probabilities(const Model<float>& model, const Dataset& ds);

enum class Pooling { mean, max };
Pooling pooling_from_string(const std::string& s);

/// Per-instance retrieval embeddings: label-wise embeddings pooled over
/// classes, [n, embed_dim].
std::vector<double> pooled_embeddings(const Model<float>& model, const Dataset& ds, Pooling pool);

struct AblationRow {
  bool mld = false;
  bool cd = false;
  bool id = false;
  std::vector<double> map;  // one entry per seed
  std::vector<double> of1;
  std::vector<double> cf1;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::vector<uint64_t> seeds;
  std::string csv() const;  // checkmark columns + mean/std cells
};

using RunObserver =
    std::function<void(size_t row, uint64_t seed, const TrainResult& result)>;

/// The five Table-3 loss configurations (none, MLD, MLD+CD, MLD+ID,
/// MLD+CD+ID) under identical seeds.
AblationResult run_ablation(const Model<float>& teacher, const Dataset& train,
                            const Dataset& test, const ModelConfig& student_cfg,
                            const TrainConfig& base, const std::vector<uint64_t>& seeds,
                            const RunObserver& observer = nullptr);

struct SweepPoint {
  double value = 0.0;
  double map = 0.0;
  double of1 = 0.0;
  double cf1 = 0.0;
};

struct SweepResult {
  std::string parameter;
  std::vector<SweepPoint> points;
  std::string csv() const;
};

/// One L2D run per value of the chosen balancing parameter, fixed seed,
/// the other two parameters held at the base config.
SweepResult run_sweep(const Model<float>& teacher, const Dataset& train, const Dataset& test,
                      const ModelConfig& student_cfg, const TrainConfig& base,
                      const std::string& parameter, const std::vector<double>& values,
                      const RunObserver& observer = nullptr);

nlohmann::ordered_json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

}  // namespace mlkd
