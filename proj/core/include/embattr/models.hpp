#pragma once

#include <optional>
#include <string>

#include "embattr/constraint.hpp"
#include "embattr/dataset.hpp"
#include "embattr/network.hpp"

namespace embattr {

enum class ModelName { DriftAe, ConstrainedAe, MnistCnn };

const char* model_name_str(ModelName m);
std::optional<ModelName> model_from_name(const std::string& s);

// drift_ae: 3-block conv autoencoder, 32-dim bottleneck.
// constrained_ae: 2-block softplus conv encoder -> s-dim bottleneck with a
//   10-way classifier and a small FC decoder.
// mnist_cnn: constrained_ae encoder + classifier only.
struct ModelRecipe {
    ModelName name = ModelName::DriftAe;
    int bottleneck = 10;  // s; constrained_ae table uses {2,3,5,10}
    std::uint64_t seed = 0;
};

// n_ep(s) schedule: 2->20, 3->15, 5->10, 10->5; drift_ae trains 5 epochs.
int default_epochs(const ModelRecipe& r);

Network build_model(const ModelRecipe& r);

struct TrainConfig {
    int epochs = 0;  // must be set (CLI resolves default_epochs)
    int batch_size = 64;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    std::optional<ConstraintCfg> constraint;
    bool log_to_stderr = false;
};

struct EpochStats {
    int epoch;
    double train_loss;
    double test_accuracy;  // NaN for models without a classifier
};

struct TrainResult {
    std::vector<EpochStats> log;
    double final_test_accuracy() const { return log.empty() ? 0.0 : log.back().test_accuracy; }
};

// Deterministic under (cfg.seed, single model instance). Aborts on
// non-finite loss.
TrainResult train_model(Network& net, const Dataset& train, const Dataset& test,
                        const TrainConfig& cfg);

double evaluate_accuracy(Network& net, const Dataset& data, int batch_size = 250);

}  // namespace embattr
