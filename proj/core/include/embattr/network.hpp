#pragma once

#include <string>
#include <utility>
#include <vector>

#include "embattr/layers.hpp"

namespace embattr {

struct ProbePoint {
    std::string name;
    int trunk_index;  // activation after trunk[trunk_index]
};

// Ordered layer stacks: trunk maps input to the embedding; optional heads
// map the embedding to classifier logits and a reconstruction.
class Network {
public:
    Shape input_shape;  // batchless, e.g. [1,28,28]
    std::vector<Layer> trunk;
    std::vector<Layer> classifier;
    std::vector<Layer> decoder;
    std::vector<ProbePoint> probes;

    struct ForwardOptions {
        bool training = false;
        bool update_running_stats = true;
        bool with_classifier = true;
        bool with_decoder = true;
        std::vector<int> capture;           // probe ids
        bool capture_stop_gradient = false; // captured activation becomes the graph root
    };
    struct ForwardResult {
        Tensor embedding;
        Tensor logits;          // undefined when absent/skipped
        Tensor reconstruction;  // undefined when absent/skipped
        std::vector<Tensor> captured;
    };

    ForwardResult forward(const Tensor& x, const ForwardOptions& opts);
    ForwardResult forward(const Tensor& x) { return forward(x, ForwardOptions{}); }

    bool has_classifier() const { return !classifier.empty(); }
    bool has_decoder() const { return !decoder.empty(); }

    int probe_count() const { return static_cast<int>(probes.size()); }
    int probe_id(const std::string& name) const;  // -1 if unknown
    Shape probe_shape(int probe) const;           // batchless [C,H,W] or [F]
    std::int64_t embedding_dim() const;

    std::vector<std::pair<std::string, Tensor*>> named_parameters();  // trainable
    std::vector<std::pair<std::string, Tensor*>> named_state();       // + batchnorm running stats
    std::vector<Tensor*> parameters();
    void set_trainable(bool on);

    // Deep copy: parameters and running stats are cloned, not shared.
    Network clone() const;

    // Named layers with parameters in trunk + classifier (randomization targets).
    std::vector<std::string> param_layer_names() const;
    // Re-initializes one layer (or "all" for every layer incl. heads) in place.
    void reinit_layer(const std::string& name, Rng& rng);

    void save_checkpoint(const std::string& path) const;
    void load_checkpoint(const std::string& path);

private:
    Layer* find_layer(const std::string& name);
};

// Appends a layer to a stack, resolving shapes. `cur` is the running
// batchless shape, updated in place.
void push_layer(std::vector<Layer>& stack, LayerSpec spec, std::string name, Shape& cur, Rng& rng);

}  // namespace embattr
