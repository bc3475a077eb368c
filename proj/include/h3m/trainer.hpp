#pragma once

#include <optional>
#include <string>
#include <vector>

#include "h3m/dataio.hpp"
#include "h3m/model.hpp"

namespace h3m::trainer {

struct TrainConfig {
    std::size_t epochs = 40;
    double learning_rate = 1e-4;
    double weight_decay = 0.05;
    double warmup_fraction = 0.10;
    double alpha = 0.1, beta = 0.1;
    std::size_t lookback = 20;  // T
    std::size_t horizon = 10;   // d
    std::uint64_t seed = 42;
    // Adam moment constants (paper-silent, standard values).
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// base * min(step / warmup, (total - step) / (total - warmup)); continuous,
// peaks at warmup end, zero at the final step. step is 1-based.
double lr_at(std::size_t step, std::size_t total_steps, double warmup_fraction, double base);

// Decoupled weight-decay Adam over a ParamStore.
class AdamW {
public:
    AdamW(const ad::ParamStore& store, const TrainConfig& cfg);
    // Applies one update from the grads currently held on the parameters.
    // Throws on non-finite gradients.
    void step(ad::ParamStore& store, double lr);
    std::size_t steps_taken() const { return t_; }

private:
    TrainConfig cfg_;
    std::size_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0, train_aux_market = 0, train_aux_industry = 0;
    double val_accuracy = 0;
    double lr_last = 0;
};

struct FitResult {
    std::vector<EpochLog> log;
    std::size_t best_epoch = 0;
    double best_val_accuracy = 0;
    std::size_t steps = 0;
};

// One sample = all N stocks over the T-window ending at day t, labelled by
// close(t) vs close(t+d); both window and label day must lie inside the
// owning split.
std::vector<std::size_t> window_ends(const dataio::DatasetSplit& split, int which,
                                     std::size_t lookback, std::size_t horizon);

// Extracts (xq, xn, xt, labels) for the window ending at day t.
struct WindowBatch {
    Tensor xq, xn, xt, labels;
};
WindowBatch make_window(const dataio::StockPanel& panel, const Tensor& labels,
                        std::size_t t_end, std::size_t lookback);

FitResult fit(model::Model& m, const dataio::StockPanel& panel,
              const dataio::DatasetSplit& split, const Tensor& labels,
              const TrainConfig& cfg, const std::string& checkpoint_dir = "",
              const std::string& log_path = "");

// Fraction of correct 0.5-thresholded predictions over the given windows.
double evaluate_accuracy(const model::Model& m, const dataio::StockPanel& panel,
                         const Tensor& labels, const std::vector<std::size_t>& ends,
                         std::size_t lookback);

// Checkpoint directory: manifest.json (names, shapes, config, step) plus
// one f64 tensor file per parameter, so reload is bit-identical.
void save_checkpoint(const std::string& dir, const model::Model& m, const TrainConfig& tc,
                     std::size_t step);
struct LoadedCheckpoint {
    model::Model model;
    TrainConfig train_config;
    std::size_t step = 0;
};
LoadedCheckpoint load_checkpoint(const std::string& dir);

}  // namespace h3m::trainer
