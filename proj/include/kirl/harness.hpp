#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "kirl/agent.hpp"

namespace kirl {

/// Everything a `train` invocation needs. Loaded from JSON; see README for the schema.
struct ExperimentConfig {
  TrainConfig train;
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path output_dir = "out";
  int checkpoint_interval = 20;  // also saves iteration 0 and the final iteration
  int eval_episodes = 5;
  std::uint64_t eval_seed = 12345;

  void validate() const;
};

ExperimentConfig load_experiment_config(const std::filesystem::path& path);
ExperimentConfig parse_experiment_config(std::string_view json_text);
std::string experiment_config_to_json(const ExperimentConfig& config);

/// Metrics CSV layout. Each file starts with a "# schema=..." comment line.
inline constexpr std::string_view kMetricsSchema = "kirl.metrics/1";
inline constexpr std::string_view kAggregateSchema = "kirl.aggregate/1";
inline constexpr std::string_view kTrajectorySchema = "kirl.trajectories/1";
inline constexpr std::string_view kModelCompareSchema = "kirl.model_compare/1";
inline constexpr std::string_view kModelLossSchema = "kirl.model_loss/1";
inline constexpr std::string_view kEvalSchema = "kirl.eval/1";

/// Shortest round-trip-stable decimal form used in every CSV; NaN prints as NA.
std::string format_number(double v);

void write_metrics_csv(std::ostream& out, const std::vector<IterationMetrics>& rows);
/// Columns averaged across seeds in the aggregate file.
const std::vector<std::string>& aggregate_columns();

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(std::string_view name) const;
};

CsvTable read_csv(const std::filesystem::path& path);

/// Per-iteration mean and population std across the given per-seed metrics files.
void write_aggregate_csv(std::ostream& out, const std::vector<std::filesystem::path>& seed_files);

struct RunResult {
  std::vector<std::filesystem::path> seed_metrics;
  std::filesystem::path aggregate;
  std::vector<std::filesystem::path> final_checkpoints;
};

/// Trains every seed and writes out/seed_N/metrics.csv, out/aggregate.csv and
/// out/checkpoints/seed_N/iter_NNNN. Wall times go to out/seed_N/timing.csv.
RunResult run_experiment(const ExperimentConfig& config);

struct EvalSummary {
  int episodes = 0;
  double mean_return = 0.0;
  double avg_speed = 0.0;
  double speed_std = 0.0;
  int collisions = 0;
  std::vector<EpisodeSummary> per_episode;
};

/// Deterministic rollouts (mean action) over `episodes` episodes. Episode seeds
/// are drawn from `seed`, so equal seeds give equal traffic across controllers.
EvalSummary evaluate(const EnvConfig& env, const PolicyPair& pair, int episodes,
                     std::uint64_t seed);

enum class Baseline { AllIdm, PiOnly };
EvalSummary evaluate_baseline(EnvConfig env, Baseline baseline, const PiParams& pi, int episodes,
                              std::uint64_t seed);

/// Evaluates a checkpoint bundle under the given variant's policy composition.
EvalSummary evaluate_checkpoint(const EnvConfig& env, const std::filesystem::path& bundle,
                                AgentVariant variant, const PiParams& pi, int episodes,
                                std::uint64_t seed);

void write_eval_csv(std::ostream& out, const EvalSummary& summary);

// Car-following corpus.

enum class CfScenario { Accelerate, Decelerate, Cruise, EmergencyBrake };
std::string_view to_string(CfScenario s);

struct CfSample {
  double v_follow = 0.0;
  double v_lead = 0.0;
  double gap = 0.0;
  double accel = 0.0;  // follower acceleration, the regression target
  CfScenario scenario = CfScenario::Cruise;
};

struct CfDatasetConfig {
  int target_samples = 50000;
  int steps_per_trajectory = 200;
  double dt = 0.1;
  IdmParams idm;  // noise_std sets the follower noise
  double train_fraction = 0.7;
  double val_fraction = 0.1;
};

struct CfDataset {
  std::vector<CfSample> train, val, test;
};

CfDataset generate_cf_dataset(const CfDatasetConfig& config, Rng& rng);

/// One follower trajectory behind a leader running `scenario`.
std::vector<CfSample> simulate_cf_trajectory(CfScenario scenario, double v_follow0,
                                             double v_lead0, double gap0,
                                             const CfDatasetConfig& config, Rng& rng);

enum class CfModelKind { Knowledge, Vanilla };
std::string_view to_string(CfModelKind k);

struct CfTrainConfig {
  std::vector<int> hidden{64, 64};
  double learning_rate = 1e-3;
  int batch_size = 256;
  int epochs = 15;
  double output_gain = 0.01;
};

/// Car-following predictor: optional IDM base plus a network on standardized inputs.
struct CfModel {
  CfModelKind kind = CfModelKind::Knowledge;
  IdmParams idm;
  Mlp net;
  Eigen::Vector3d in_mean = Eigen::Vector3d::Zero();
  Eigen::Vector3d in_std = Eigen::Vector3d::Ones();

  double predict(const CfSample& s) const;
};

struct CfTrainResult {
  CfModel model;
  std::vector<double> epoch_loss;  // training MSE after each epoch
};

CfTrainResult train_cf_model(CfModelKind kind, const std::vector<CfSample>& train,
                             const IdmParams& idm, const CfTrainConfig& config, Rng& rng);
double cf_mse(const CfModel& model, const std::vector<CfSample>& data);

struct CompareRow {
  double fraction = 0.0;
  int repeat = 0;
  CfModelKind model = CfModelKind::Knowledge;
  std::size_t train_samples = 0;
  double test_mse = 0.0;
  double final_train_loss = 0.0;
};

struct CompareResult {
  std::vector<CompareRow> rows;
  // Per-epoch training loss on the full training split, first repeat.
  std::vector<double> knowledge_loss, vanilla_loss;
};

CompareResult compare_dynamics_models(const CfDataset& dataset, const std::vector<double>& fractions,
                                      int repeats, const IdmParams& idm,
                                      const CfTrainConfig& config, std::uint64_t seed);

void write_compare_csv(std::ostream& out, const CompareResult& result);
void write_compare_summary_csv(std::ostream& out, const CompareResult& result);
void write_loss_csv(std::ostream& out, const CompareResult& result);
void write_cf_dataset_csv(std::ostream& out, const CfDataset& dataset);

/// Space-time rows (t, vehicle_id, route_pos, velocity, kind, road), one per
/// vehicle per step after warmup. Returns the number of rows written.
std::size_t export_trajectories(std::ostream& out, const EnvConfig& env, const PolicyPair& pair,
                                std::uint64_t episode_seed);

/// Sets the spdlog level from KIRL_LOG (trace, debug, info, warn, error, off).
void configure_logging_from_env();

}  // namespace kirl
