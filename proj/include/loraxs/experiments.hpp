#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string_view>
#include <vector>

#include "loraxs/adapter.hpp"
#include "loraxs/training.hpp"

namespace loraxs {

enum class TaskKind { aligned_teacher, random_teacher, blobs_classification };

std::string_view to_string(TaskKind k) noexcept;
TaskKind parse_task_kind(std::string_view text);

struct TaskSpec {
    TaskKind kind = TaskKind::aligned_teacher;
    std::size_t in_dim = 64;
    std::size_t out_dim = 64;           // class count for blobs
    std::vector<std::size_t> hidden;    // blobs only: hidden widths of the base stack
    std::size_t rank_star = 4;
    double noise_std = 0.0;
    std::size_t n_samples = 640;
    // Base weights get singular values top_singular * decay^i.
    double spectral_decay = 0.9;
    double top_singular = 1.0;
    double teacher_scale = 0.5;  // std of the hidden latent / low-rank factors
    std::uint64_t seed = 0;

    void validate() const;
};

struct SyntheticTask {
    TaskSpec spec;
    std::vector<Matrix> base_weights;  // one per layer, frozen
    std::vector<Activation> activations;
    Head head = Head::mse;
    Matrix delta_star;        // teachers: hidden update added to the single base weight
    Matrix latent_star;       // aligned teacher: R* with delta_star = U_r S_r R* V_r^T
    std::uint64_t svd_seed = 0;  // sketch seed of the SVD behind delta_star
    Dataset train;
    Dataset eval;
};

// Deterministic in spec.seed; 80/20 train/eval split.
SyntheticTask gen_task(const TaskSpec& spec);

// The task's frozen stack with a LoRA-XS adapter of `rank` on every layer.
// `seed` drives the projections (svd sketch or Kaiming draws) and R.
LinearStack build_model(const SyntheticTask& task, std::size_t rank, InitKind init, double alpha, double sigma,
                        std::uint64_t seed);

// Task metric, lower is better: MSE for teachers, error rate (1 - accuracy)
// for blobs.
double eval_metric(const SyntheticTask& task, const LinearStack& model);

struct AblationRecord {
    std::size_t rank = 0;
    InitKind init = InitKind::svd;
    std::uint64_t seed = 0;
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double eval_loss = 0.0;
    bool diverged = false;
};

struct AblationOptions {
    double alpha = 8.0;
    double sigma = kDefaultLatentSigma;
    unsigned jobs = 1;
};

// One training run per (rank, init, seed), each recording every epoch.
// Output order is (rank, init, seed, epoch) following the input lists,
// independent of `jobs`.
std::vector<AblationRecord> run_ablation(const SyntheticTask& task, const std::vector<std::size_t>& ranks,
                                         const std::vector<InitKind>& inits, const std::vector<std::uint64_t>& seeds,
                                         const TrainConfig& config, const AblationOptions& options = {});

struct SummaryRow {
    std::size_t rank = 0;
    InitKind init = InitKind::svd;
    std::size_t seeds = 0;
    double median_best = 0.0;  // best epoch per seed, then median
    double median_ep1 = 0.0;   // NaN when absent
    double median_ep2 = 0.0;
};

double median(std::vector<double> values);

// Rows sorted by rank, svd before random.
std::vector<SummaryRow> summarize(const std::vector<AblationRecord>& records);

// Epoch-1 head-to-head of svd vs random at one rank, matched by seed.
struct InitComparison {
    std::size_t seeds = 0;
    std::size_t svd_wins_epoch1 = 0;
    double median_best_svd = 0.0;
    double median_best_random = 0.0;
};
InitComparison compare_inits(const std::vector<AblationRecord>& records, std::size_t rank);

void write_records_csv(std::ostream& out, const std::vector<AblationRecord>& records);
void write_summary_csv(std::ostream& out, const std::vector<SummaryRow>& rows);
void write_summary_table(std::ostream& out, const std::vector<SummaryRow>& rows);

}  // namespace loraxs
