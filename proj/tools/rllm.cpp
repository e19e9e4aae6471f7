// Pipeline driver: one subcommand per stage, chained through artifacts in
// an output directory. See README.md for the config schema and formats.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rllm/config.hpp"
#include "rllm/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliState {
  std::string config_path;
  std::string out_dir = "run";
  std::vector<std::string> overrides;  // key=value
  rllm::RunConfig cfg;
  rllm::PipelinePaths paths;
};

void finalize_config(CliState& st) {
  if (!st.config_path.empty()) st.cfg = rllm::load_config_file(st.config_path);
  for (const auto& kv : st.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw rllm::ValidationError("--set expects key=value, got '" + kv + "'");
    rllm::set_config_key(st.cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (const char* env_seed = std::getenv("RLLM_SEED"))
    rllm::set_config_key(st.cfg, "seed", env_seed);
  rllm::validate_config(st.cfg);
  st.paths.out = st.out_dir;
}

void require_artifact(const std::string& path) {
  if (!fs::exists(path))
    throw rllm::ArtifactMismatch("missing upstream artifact: " + path);
}

std::uint64_t artifact_hash(const std::string& path) {
  if (fs::is_directory(path)) return rllm::hash_file((fs::path(path) / "tensors.bin").string());
  return rllm::hash_file(path);
}

void append_manifest(const CliState& st, const std::string& command,
                     const std::vector<std::string>& inputs,
                     const std::vector<std::string>& outputs, double wall_ms) {
  fs::create_directories(st.paths.out);
  json line;
  line["command"] = command;
  line["config_hash"] = rllm::hash_hex(rllm::config_hash(st.cfg));
  json in = json::object(), out = json::object();
  for (const auto& p : inputs) in[p] = rllm::hash_hex(artifact_hash(p));
  for (const auto& p : outputs) out[p] = rllm::hash_hex(artifact_hash(p));
  line["inputs"] = std::move(in);
  line["outputs"] = std::move(out);
  line["wall_ms"] = wall_ms;
  std::ofstream os(st.paths.manifest(), std::ios::app);
  os << line.dump() << "\n";
}

// Runs a stage body, timing it and recording the manifest line.
template <class F>
void run_stage(CliState& st, const std::string& command, const std::vector<std::string>& inputs,
               const std::vector<std::string>& outputs, F&& body) {
  for (const auto& p : inputs) require_artifact(p);
  const auto t0 = std::chrono::steady_clock::now();
  body();
  const auto t1 = std::chrono::steady_clock::now();
  const double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  append_manifest(st, command, inputs, outputs, ms);
}

void print_report_table(std::ostream& os, const std::vector<std::string>& names,
                        const std::vector<rllm::DetectionReport>& reports) {
  os << "dataset,detection_rate,achieved_far,threshold,n_target,n_clutter\n";
  double mean_dr = 0.0;
  char buf[200];
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    std::snprintf(buf, sizeof(buf), "%s,%.6g,%.6g,%.9g,%zu,%zu\n", names[i].c_str(),
                  100.0 * r.detection_rate, r.achieved_far, r.threshold, r.n_target, r.n_clutter);
    os << buf;
    mean_dr += r.detection_rate;
  }
  std::snprintf(buf, sizeof(buf), "AVG,%.6g,,,,\n", 100.0 * mean_dr / reports.size());
  os << buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"radar sea-clutter target detection pipeline"};
  app.require_subcommand(1);

  CliState st;
  app.add_option("--config", st.config_path, "config file (key = value lines)");
  app.add_option("--out", st.out_dir, "artifact directory")->capture_default_str();
  app.add_option("--set", st.overrides, "override a config key (key=value, repeatable)");

  std::string seed_override, loss_mode_override, alpha_override, pfa_override, profile_override;
  app.add_option("--seed", seed_override, "override config seed");
  app.add_option("--loss-mode", loss_mode_override,
                 "preference | plain_ce | weighted_ce_sample");
  app.add_option("--alpha", alpha_override, "importance score scaling coefficient");
  app.add_option("--p-fa", pfa_override, "requested false alarm rate");
  app.add_option("--profile", profile_override, "desk | full");

  auto* c_synth = app.add_subcommand("synth", "synthesize a scene and segment it into a dataset");
  std::string synth_csv;
  c_synth->add_option("--dump-csv", synth_csv, "also export the dataset as CSV");
  auto* c_ingest = app.add_subcommand("ingest", "segment an external echo file into a dataset");
  std::string ingest_input;
  c_ingest->add_option("--input", ingest_input, "echo file (.rlle binary or echo CSV)")->required();
  std::string ingest_csv;
  c_ingest->add_option("--dump-csv", ingest_csv, "also export the dataset as CSV");
  auto* c_features = app.add_subcommand("features", "extract features and build the token file");
  std::string feature_csv;
  c_features->add_option("--dump-csv", feature_csv, "also dump raw features as CSV");
  auto* c_trainref = app.add_subcommand("train-ref", "train the reference model on the validation split");
  auto* c_score = app.add_subcommand("score", "cache per-token reference losses for the training split");
  auto* c_finetune = app.add_subcommand("finetune", "fine-tune the backbone (stage 3)");
  auto* c_trainhead = app.add_subcommand("train-head", "retrain the autoencoder head (stage 4)");
  auto* c_eval = app.add_subcommand("eval", "score the test split and write the detection report");
  bool use_aggregation = false;
  c_eval->add_flag("--use-aggregation", use_aggregation,
                   "score via token-output averaging instead of the AE head");
  auto* c_roc = app.add_subcommand("roc", "re-emit the ROC curve of a report as CSV");
  std::string roc_report, roc_out;
  c_roc->add_option("--report", roc_report, "report JSON (default: <out>/report.json)");
  c_roc->add_option("--output", roc_out, "CSV path (default: <out>/roc.csv)");
  auto* c_report = app.add_subcommand("report", "merge detection reports into a table");
  std::vector<std::string> report_files, compare_pa, compare_ce;
  c_report->add_option("files", report_files, "report JSON files");
  c_report->add_option("--pa", compare_pa, "preference-mode reports (with --ce)");
  c_report->add_option("--ce", compare_ce, "plain-CE reports (with --pa)");
  std::string report_out;
  c_report->add_option("--output", report_out, "write the table to a file instead of stdout");

  CLI11_PARSE(app, argc, argv);

  if (!seed_override.empty()) st.overrides.push_back("seed=" + seed_override);
  if (!loss_mode_override.empty()) st.overrides.push_back("loss_mode=" + loss_mode_override);
  if (!alpha_override.empty()) st.overrides.push_back("alpha=" + alpha_override);
  if (!pfa_override.empty()) st.overrides.push_back("p_fa=" + pfa_override);
  if (!profile_override.empty()) st.overrides.push_back("profile=" + profile_override);

  try {
    finalize_config(st);
    const auto& paths = st.paths;
    if (c_synth->parsed()) {
      run_stage(st, "synth", {}, {paths.echoes(), paths.dataset()}, [&] {
        rllm::run_synth(st.cfg, st.paths);
        const auto d = rllm::read_dataset(st.paths.dataset());
        if (!synth_csv.empty()) rllm::write_dataset_csv(synth_csv, d.data);
        std::cout << "synth: " << d.data.vectors.size() << " observation vectors (N="
                  << d.data.window_len << ")\n";
      });
    } else if (c_ingest->parsed()) {
      run_stage(st, "ingest", {ingest_input}, {paths.dataset()}, [&] {
        rllm::run_ingest(st.cfg, st.paths, ingest_input);
        if (!ingest_csv.empty())
          rllm::write_dataset_csv(ingest_csv, rllm::read_dataset(st.paths.dataset()).data);
      });
    } else if (c_features->parsed()) {
      run_stage(st, "features", {paths.dataset()}, {paths.tokens()}, [&] {
        const auto degenerate = rllm::run_features(st.cfg, st.paths);
        if (degenerate)
          std::cerr << "features: " << degenerate << " sample(s) had all-zero Doppler spectra\n";
        if (!feature_csv.empty()) {
          const auto file = rllm::read_dataset(st.paths.dataset());
          std::ofstream os(feature_csv);
          os << "sample_id,feature_name,bin_index,value\n";
          const auto fcfg = rllm::feature_config(st.cfg);
          for (const auto& v : file.data.vectors)
            rllm::write_feature_csv(os, v.sample_id, rllm::extract_all(v, fcfg));
        }
        std::cout << "features: wrote " << paths.tokens() << "\n";
      });
    } else if (c_trainref->parsed()) {
      run_stage(st, "train-ref", {paths.tokens()}, {paths.ref_ckpt()}, [&] {
        const double ce = rllm::run_train_ref(st.cfg, st.paths);
        std::cout << "train-ref: final validation token CE " << ce << "\n";
      });
    } else if (c_score->parsed()) {
      run_stage(st, "score", {paths.tokens(), paths.ref_ckpt()}, {paths.scores()}, [&] {
        const auto n = rllm::run_score(st.cfg, st.paths);
        std::cout << "score: cached reference losses for " << n << " samples\n";
      });
    } else if (c_finetune->parsed()) {
      std::vector<std::string> inputs{paths.tokens()};
      if (rllm::loss_mode_from(st.cfg.loss_mode) != rllm::LossMode::plain_ce)
        inputs.push_back(paths.scores());
      run_stage(st, "finetune", inputs,
                {paths.backbone_ckpt(), paths.train_log(), paths.token_weights()}, [&] {
                  const auto log = rllm::run_finetune(st.cfg, st.paths);
                  std::cout << "finetune(" << st.cfg.loss_mode << "): " << log.epochs.size()
                            << " epochs, final mean target loss "
                            << log.epochs.back().mean_target_loss << "\n";
                });
    } else if (c_trainhead->parsed()) {
      run_stage(st, "train-head", {paths.tokens(), paths.backbone_ckpt()}, {paths.head_ckpt()},
                [&] {
                  const double loss = rllm::run_train_head(st.cfg, st.paths);
                  std::cout << "train-head: final total loss " << loss << "\n";
                });
    } else if (c_eval->parsed()) {
      std::vector<std::string> inputs{paths.tokens(), paths.backbone_ckpt()};
      if (!use_aggregation) inputs.push_back(paths.head_ckpt());
      run_stage(st, "eval", inputs, {paths.report(), paths.roc()}, [&] {
        const auto r = rllm::run_eval(st.cfg, st.paths, use_aggregation);
        std::cout << "eval: DR " << 100.0 * r.detection_rate << "% at requested FAR "
                  << r.p_fa_requested << " (achieved " << r.achieved_far << ", threshold "
                  << r.threshold << ")\n";
      });
    } else if (c_roc->parsed()) {
      const std::string in = roc_report.empty() ? paths.report() : roc_report;
      const std::string out = roc_out.empty() ? paths.roc() : roc_out;
      require_artifact(in);
      std::ifstream is(in);
      json j;
      is >> j;
      rllm::write_roc_csv(out, rllm::report_from_json(j).roc);
      std::cout << "roc: wrote " << out << "\n";
    } else if (c_report->parsed()) {
      const bool compare = !compare_pa.empty() || !compare_ce.empty();
      std::ostringstream table;
      if (compare) {
        if (compare_pa.size() != compare_ce.size() || compare_pa.empty())
          throw rllm::ValidationError("report --compare needs matching --pa/--ce lists");
        table << "dataset,dr_preference,dr_plain_ce,delta\n";
        double mean_delta = 0.0, mean_pa = 0.0, mean_ce = 0.0;
        char buf[200];
        for (std::size_t i = 0; i < compare_pa.size(); ++i) {
          require_artifact(compare_pa[i]);
          require_artifact(compare_ce[i]);
          std::ifstream ia(compare_pa[i]), ib(compare_ce[i]);
          json ja, jb;
          ia >> ja;
          ib >> jb;
          const double pa = 100.0 * rllm::report_from_json(ja).detection_rate;
          const double ce = 100.0 * rllm::report_from_json(jb).detection_rate;
          std::snprintf(buf, sizeof(buf), "%s,%.6g,%.6g,%+.6g\n",
                        fs::path(compare_pa[i]).stem().string().c_str(), pa, ce, pa - ce);
          table << buf;
          mean_pa += pa;
          mean_ce += ce;
          mean_delta += pa - ce;
        }
        const double n = static_cast<double>(compare_pa.size());
        std::snprintf(buf, sizeof(buf), "AVG,%.6g,%.6g,%+.6g\n", mean_pa / n, mean_ce / n,
                      mean_delta / n);
        table << buf;
      } else {
        if (report_files.empty()) throw rllm::ValidationError("report: no input files");
        std::vector<rllm::DetectionReport> reports;
        std::vector<std::string> names;
        for (const auto& f : report_files) {
          require_artifact(f);
          std::ifstream is(f);
          json j;
          is >> j;
          reports.push_back(rllm::report_from_json(j));
          names.push_back(fs::path(f).stem().string());
        }
        print_report_table(table, names, reports);
      }
      if (report_out.empty()) {
        std::cout << table.str();
      } else {
        std::ofstream os(report_out);
        os << table.str();
      }
    }
  } catch (const rllm::ArtifactMismatch& e) {
    std::cerr << "error (artifact): " << e.what() << "\n";
    return 4;
  } catch (const rllm::FormatError& e) {
    std::cerr << "error (format): " << e.what() << "\n";
    return 4;
  } catch (const rllm::NumericError& e) {
    std::cerr << "error (numeric): " << e.what() << "\n";
    return 3;
  } catch (const std::logic_error& e) {
    std::cerr << "error (internal): " << e.what() << "\n";
    return 3;
  } catch (const rllm::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
