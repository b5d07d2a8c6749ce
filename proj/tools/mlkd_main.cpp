// Command-line workbench: synthetic data generation, teacher training,
// student distillation, evaluation, ablation, parameter sweeps, retrieval
// and correlation reports.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "mlkd/config_io.hpp"
#include "mlkd/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

struct RunSpec {
  mlkd::SceneSpec scene;
  mlkd::ModelConfig teacher;
  mlkd::ModelConfig student;
  mlkd::TrainConfig train;
  bool has_teacher_section = false;
  bool has_student_section = false;
};

json load_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw mlkd::ConfigError("cannot open config file: " + path);
  try {
    json j;
    f >> j;
    return j;
  } catch (const json::exception& e) {
    throw mlkd::ConfigError(path + ": " + e.what());
  }
}

RunSpec load_run_spec(const std::string& config_path, uint64_t seed_override, bool has_seed) {
  RunSpec spec;
  spec.scene = mlkd::SceneSpec::desk_default();
  spec.teacher = mlkd::ModelConfig::teacher_default();
  spec.student = mlkd::ModelConfig::student_default();
  if (!config_path.empty()) {
    json j = load_json_file(config_path);
    if (j.contains("scene")) spec.scene = mlkd::scene_spec_from_json(j.at("scene"));
    if (j.contains("teacher")) {
      spec.teacher = mlkd::model_config_from_json(j.at("teacher"));
      spec.has_teacher_section = true;
    }
    if (j.contains("student")) {
      spec.student = mlkd::model_config_from_json(j.at("student"));
      spec.has_student_section = true;
    }
    if (j.contains("train")) spec.train = mlkd::train_config_from_json(j.at("train"));
  }
  if (has_seed) {
    spec.scene.seed = seed_override;
    spec.train.seed = seed_override;
  }
  return spec;
}

void write_text(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw mlkd::ConfigError("cannot write " + path.string());
  f << content;
}

mlkd::Dataset load_split(const std::string& data_dir, const std::string& split) {
  return mlkd::load_dataset((fs::path(data_dir) / (split + ".mlds")).string());
}

mlkd::Model<float> load_teacher(const std::string& dir) {
  return mlkd::load_model<float>((fs::path(dir) / "checkpoint.bin").string(),
                                 (fs::path(dir) / "checkpoint.json").string());
}

ordered_json resolved_config(const RunSpec& spec, const mlkd::ModelConfig& model_cfg) {
  ordered_json j;
  j["scene"] = mlkd::scene_spec_to_json(spec.scene);
  j["model"] = mlkd::model_config_to_json(model_cfg);
  j["train"] = mlkd::train_config_to_json(spec.train);
  ordered_json aug;
  aug["mode"] = to_string(spec.train.augment);
  aug["flip_p"] = 0.5;
  aug["cutout_side"] = (spec.scene.height + 3) / 4;
  aug["strong_pool"] = {"brightness_shift", "channel_scale", "translation"};
  j["augmentation"] = std::move(aug);
  return j;
}

void write_run_outputs(const fs::path& out, RunSpec spec, const mlkd::Dataset& train_data,
                       const mlkd::TrainResult& result) {
  fs::create_directories(out);
  spec.scene = train_data.spec;
  write_text(out / "config.json", resolved_config(spec, result.model_config).dump(2) + "\n");
  write_text(out / "history.csv", result.history_csv);
  write_text(out / "epochs.csv", result.epochs_csv);
  write_text(out / "metrics.json", result.best_metrics.to_json() + "\n");
  write_text(out / "ap_table.csv",
             mlkd::ap_table_csv(result.best_metrics, train_data.class_names));
  mlkd::Model<float> best = result.build_model();
  mlkd::save_model(best, (out / "checkpoint.bin").string(), (out / "checkpoint.json").string());
}

std::vector<uint64_t> parse_seed_list(const std::string& s) {
  std::vector<uint64_t> seeds;
  std::string cur;
  for (char c : s + ",") {
    if (c == ',') {
      if (!cur.empty()) seeds.push_back(std::stoull(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (seeds.empty()) throw mlkd::ConfigError("empty seed list");
  return seeds;
}

std::vector<double> parse_value_list(const std::string& s) {
  std::vector<double> values;
  std::string cur;
  for (char c : s + ",") {
    if (c == ',') {
      if (!cur.empty()) values.push_back(std::stod(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  return values;
}

int run(int argc, char** argv) {
  CLI::App app{"multi-label knowledge distillation workbench"};
  app.require_subcommand(1);

  std::string config_path, out_dir, data_dir, teacher_dir, ckpt_dir;
  uint64_t seed = 1;
  bool has_seed = false;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config (scene/teacher/student/train)");
    cmd->add_option("--seed", seed, "override scene and train seeds")
        ->each([&](const std::string&) { has_seed = true; });
    cmd->add_option("--out", out_dir, "output directory")->required();
  };

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate synthetic train/test splits");
  int64_t n_train = 2000, n_test = 500;
  gen->add_option("--n-train", n_train, "training examples");
  gen->add_option("--n-test", n_test, "test examples");
  add_common(gen);

  // train-teacher
  auto* tt = app.add_subcommand("train-teacher", "train a model with BCE only");
  tt->add_option("--data", data_dir, "dataset directory from gen-data")->required();
  add_common(tt);

  // distill
  auto* di = app.add_subcommand("distill", "train a student under a frozen teacher");
  std::string loss_name;
  di->add_option("--data", data_dir)->required();
  di->add_option("--teacher", teacher_dir, "teacher run directory")->required();
  di->add_option("--loss", loss_name, "vanilla|mld|l2d|mse|ps");
  add_common(di);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string split = "test";
  double threshold = 0.5;
  bool with_correlation = false;
  ev->add_option("--data", data_dir)->required();
  ev->add_option("--checkpoint", ckpt_dir, "run directory with checkpoint.{bin,json}")->required();
  ev->add_option("--split", split, "train|test");
  ev->add_option("--threshold", threshold, "F1 decision threshold");
  ev->add_flag("--correlation", with_correlation, "include the correlation matrix");
  add_common(ev);

  // ablate
  auto* ab = app.add_subcommand("ablate", "run the five-row loss ablation");
  std::string seeds_arg = "1";
  ab->add_option("--data", data_dir)->required();
  ab->add_option("--teacher", teacher_dir)->required();
  ab->add_option("--seeds", seeds_arg, "comma-separated seed list");
  add_common(ab);

  // sweep
  auto* sw = app.add_subcommand("sweep", "sweep one balancing parameter");
  std::string parameter = "lambda_cd", values_arg = "10,100,1000";
  sw->add_option("--data", data_dir)->required();
  sw->add_option("--teacher", teacher_dir)->required();
  sw->add_option("--parameter", parameter, "lambda_mld|lambda_cd|lambda_id");
  sw->add_option("--values", values_arg, "comma-separated positive values");
  add_common(sw);

  // retrieve
  auto* re = app.add_subcommand("retrieve", "k-NN retrieval in the embedding space");
  int64_t query_index = 0, k = 5;
  std::string pooling = "mean";
  re->add_option("--data", data_dir)->required();
  re->add_option("--checkpoint", ckpt_dir)->required();
  re->add_option("--query", query_index, "query index into the test split");
  re->add_option("--k", k, "neighbors to return");
  re->add_option("--pooling", pooling, "mean|max embedding pooling");
  add_common(re);

  // report
  auto* rp = app.add_subcommand("report", "correlation analysis over an ablation directory");
  std::string ablation_dir;
  rp->add_option("--data", data_dir)->required();
  rp->add_option("--teacher", teacher_dir)->required();
  rp->add_option("--ablation-dir", ablation_dir, "directory produced by ablate")->required();
  add_common(rp);

  CLI11_PARSE(app, argc, argv);
  RunSpec spec = load_run_spec(config_path, seed, has_seed);
  fs::path out(out_dir);

  if (gen->parsed()) {
    spec.scene.resolve();
    auto [train, test] = mlkd::generate_dataset(spec.scene, n_train, n_test);
    fs::create_directories(out);
    mlkd::save_dataset(train, (out / "train.mlds").string());
    mlkd::save_dataset(test, (out / "test.mlds").string());
    ordered_json j;
    j["scene"] = mlkd::scene_spec_to_json(spec.scene);
    j["n_train"] = n_train;
    j["n_test"] = n_test;
    write_text(out / "config.json", j.dump(2) + "\n");
    std::cout << "wrote " << (out / "train.mlds").string() << " (" << n_train << ") and "
              << (out / "test.mlds").string() << " (" << n_test << ")\n";
    return 0;
  }

  if (tt->parsed()) {
    auto train = load_split(data_dir, "train");
    auto test = load_split(data_dir, "test");
    if (!spec.has_teacher_section) spec.teacher.classes = train.spec.classes;
    spec.train.loss = mlkd::LossSelection::vanilla;
    auto result = mlkd::train_teacher(train, test, spec.teacher, spec.train);
    write_run_outputs(out, spec, train, result);
    std::cout << "teacher best mAP " << result.best_metrics.map << " (epoch "
              << result.best_epoch << ") -> " << out.string() << "\n";
    return 0;
  }

  if (di->parsed()) {
    auto train = load_split(data_dir, "train");
    auto test = load_split(data_dir, "test");
    auto teacher = load_teacher(teacher_dir);
    if (!spec.has_student_section) spec.student.classes = train.spec.classes;
    if (!loss_name.empty()) spec.train.loss = mlkd::loss_selection_from_string(loss_name);
    spec.train.distill.baseline =
        spec.train.loss == mlkd::LossSelection::mse
            ? mlkd::DistillConfig::Baseline::mse
            : (spec.train.loss == mlkd::LossSelection::ps ? mlkd::DistillConfig::Baseline::ps
                                                          : mlkd::DistillConfig::Baseline::none);
    auto result = mlkd::distill_student(teacher, train, test, spec.student, spec.train);
    write_run_outputs(out, spec, train, result);
    std::cout << "student (" << to_string(spec.train.loss) << ") best mAP "
              << result.best_metrics.map << " (epoch " << result.best_epoch << ") -> "
              << out.string() << "\n";
    return 0;
  }

  if (ev->parsed()) {
    auto ds = load_split(data_dir, split);
    auto model = load_teacher(ckpt_dir);
    auto report = mlkd::evaluate(model, ds, threshold, with_correlation);
    fs::create_directories(out);
    write_text(out / "metrics.json", report.to_json() + "\n");
    write_text(out / "ap_table.csv", mlkd::ap_table_csv(report, ds.class_names));
    std::cout << "mAP " << report.map << "  OF1 " << report.of1 << "  CF1 " << report.cf1
              << " -> " << out.string() << "\n";
    return 0;
  }

  if (ab->parsed()) {
    auto train = load_split(data_dir, "train");
    auto test = load_split(data_dir, "test");
    auto teacher = load_teacher(teacher_dir);
    auto seeds = parse_seed_list(seeds_arg);
    fs::create_directories(out);
    auto observer = [&](size_t row, uint64_t run_seed, const mlkd::TrainResult& tr) {
      fs::path run_dir = out / ("row" + std::to_string(row) + "_seed" + std::to_string(run_seed));
      write_run_outputs(run_dir, spec, train, tr);
      std::cout << "  row " << row << " seed " << run_seed << " mAP " << tr.best_metrics.map
                << "\n";
    };
    auto result = mlkd::run_ablation(teacher, train, test, spec.student, spec.train, seeds,
                                     observer);
    write_text(out / "ablation.csv", result.csv());
    std::cout << result.csv();
    return 0;
  }

  if (sw->parsed()) {
    auto train = load_split(data_dir, "train");
    auto test = load_split(data_dir, "test");
    auto teacher = load_teacher(teacher_dir);
    auto values = parse_value_list(values_arg);
    fs::create_directories(out);
    auto result = mlkd::run_sweep(teacher, train, test, spec.student, spec.train, parameter,
                                  values);
    write_text(out / "sweep.csv", result.csv());
    std::cout << result.csv();
    return 0;
  }

  if (re->parsed()) {
    auto ds = load_split(data_dir, "test");
    auto model = load_teacher(ckpt_dir);
    if (query_index < 0 || query_index >= ds.count)
      throw mlkd::ConfigError("retrieve: query index out of range");
    auto embs = mlkd::pooled_embeddings(model, ds, mlkd::pooling_from_string(pooling));
    int64_t d = model.config().embed_dim;
    std::vector<double> query(embs.begin() + query_index * d,
                              embs.begin() + (query_index + 1) * d);
    std::vector<uint8_t> qlabels(ds.label_row(query_index),
                                 ds.label_row(query_index) + ds.spec.classes);
    auto table = mlkd::retrieval_table(embs, ds.labels, ds.count, d, ds.spec.classes, query,
                                       qlabels, k);
    ordered_json j;
    j["query_index"] = query_index;
    j["pooling"] = pooling;
    ordered_json qn = ordered_json::array();
    for (int64_t c = 0; c < ds.spec.classes; ++c)
      if (qlabels[c]) qn.push_back(ds.class_names[c]);
    j["query_labels"] = qn;
    ordered_json rows = ordered_json::array();
    for (const auto& e : table) {
      ordered_json r;
      r["index"] = e.index;
      r["distance"] = e.distance;
      ordered_json shared = ordered_json::array(), all = ordered_json::array();
      for (int64_t c : e.shared_labels) shared.push_back(ds.class_names[c]);
      for (int64_t c : e.result_labels) all.push_back(ds.class_names[c]);
      r["shared_labels"] = shared;
      r["result_labels"] = all;
      rows.push_back(std::move(r));
    }
    j["results"] = rows;
    fs::create_directories(out);
    write_text(out / "retrieval.json", j.dump(2) + "\n");
    std::cout << j.dump(2) << "\n";
    return 0;
  }

  if (rp->parsed()) {
    auto test = load_split(data_dir, "test");
    auto teacher = load_teacher(teacher_dir);
    auto teacher_probs = mlkd::eval_probabilities(teacher, test);
    auto teacher_corr = mlkd::correlation_matrix(teacher_probs, test.count, test.spec.classes);
    ordered_json j;
    j["teacher_self_diff"] = mlkd::correlation_diff(teacher_corr, teacher_corr);
    j["teacher_correlation"] = teacher_corr;
    ordered_json rows = ordered_json::array();
    std::ostringstream csv;
    csv << "run,correlation_diff_vs_teacher\n";
    std::vector<fs::path> run_dirs;
    for (const auto& entry : fs::directory_iterator(ablation_dir))
      if (entry.is_directory() && entry.path().filename().string().rfind("row", 0) == 0)
        run_dirs.push_back(entry.path());
    std::sort(run_dirs.begin(), run_dirs.end());
    for (const auto& dir : run_dirs) {
      auto student = load_teacher(dir.string());
      auto probs = mlkd::eval_probabilities(student, test);
      auto corr = mlkd::correlation_matrix(probs, test.count, test.spec.classes);
      double diff = mlkd::correlation_diff(teacher_corr, corr);
      ordered_json r;
      r["run"] = dir.filename().string();
      r["correlation_diff_vs_teacher"] = diff;
      r["correlation"] = corr;
      rows.push_back(std::move(r));
      csv << dir.filename().string() << "," << diff << "\n";
    }
    j["runs"] = rows;
    fs::create_directories(out);
    write_text(out / "report.json", j.dump(2) + "\n");
    write_text(out / "report.csv", csv.str());
    std::cout << csv.str();
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const mlkd::NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
