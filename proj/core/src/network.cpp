#include "embattr/network.hpp"

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace embattr {

namespace {

constexpr char kCheckpointMagic[8] = {'E', 'M', 'B', 'A', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void write_raw(std::ofstream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_raw(std::ifstream& is, T& v, const std::string& path) {
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint '" + path + "': truncated file");
}

}  // namespace

void push_layer(std::vector<Layer>& stack, LayerSpec spec, std::string name, Shape& cur, Rng& rng) {
    Layer layer;
    layer.spec = spec;
    layer.name = std::move(name);
    layer.init(cur, rng);
    cur = layer_output_shape(spec, cur);
    stack.push_back(std::move(layer));
}

Network::ForwardResult Network::forward(const Tensor& x, const ForwardOptions& opts) {
    if (x.ndim() != input_shape.size() + 1)
        throw std::invalid_argument("forward: expected batched input with shape [B," +
                                    shape_str(input_shape).substr(1) + ", got " + shape_str(x.shape()));
    for (std::size_t i = 0; i < input_shape.size(); ++i) {
        if (x.dim(i + 1) != input_shape[i])
            throw std::invalid_argument("forward: input " + shape_str(x.shape()) +
                                        " does not match network input " + shape_str(input_shape));
    }
    if (opts.capture_stop_gradient && opts.capture.size() > 1)
        throw std::invalid_argument("forward: stop-gradient capture supports a single probe");

    LayerForwardOptions lopts;
    lopts.training = opts.training;
    lopts.update_running_stats = opts.update_running_stats;

    ForwardResult res;
    res.captured.resize(opts.capture.size());

    for (int p : opts.capture) {
        if (p < 0 || p >= probe_count())
            throw std::invalid_argument("forward: unknown probe " + std::to_string(p) + ", network has " +
                                        std::to_string(probe_count()) + " probes");
    }

    Tensor a = x;
    for (int li = 0; li < static_cast<int>(trunk.size()); ++li) {
        a = layer_forward(trunk[static_cast<std::size_t>(li)], a, lopts);
        for (std::size_t ci = 0; ci < opts.capture.size(); ++ci) {
            if (probes[static_cast<std::size_t>(opts.capture[ci])].trunk_index != li) continue;
            if (opts.capture_stop_gradient) {
                a = a.detach();
                a.set_requires_grad(true);
            }
            res.captured[ci] = a;
        }
    }
    res.embedding = a;

    if (opts.with_classifier && has_classifier()) {
        Tensor h = a;
        for (auto& l : classifier) h = layer_forward(l, h, lopts);
        res.logits = h;
    }
    if (opts.with_decoder && has_decoder()) {
        Tensor h = a;
        for (auto& l : decoder) h = layer_forward(l, h, lopts);
        res.reconstruction = h;
    }
    return res;
}

int Network::probe_id(const std::string& name) const {
    for (int i = 0; i < probe_count(); ++i)
        if (probes[static_cast<std::size_t>(i)].name == name) return i;
    return -1;
}

Shape Network::probe_shape(int probe) const {
    if (probe < 0 || probe >= probe_count())
        throw std::invalid_argument("probe_shape: unknown probe " + std::to_string(probe));
    Shape cur = input_shape;
    const int upto = probes[static_cast<std::size_t>(probe)].trunk_index;
    for (int i = 0; i <= upto; ++i)
        cur = layer_output_shape(trunk[static_cast<std::size_t>(i)].spec, cur);
    return cur;
}

std::int64_t Network::embedding_dim() const {
    Shape cur = input_shape;
    for (const auto& l : trunk) cur = layer_output_shape(l.spec, cur);
    return numel_of(cur);
}

std::vector<std::pair<std::string, Tensor*>> Network::named_parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (auto* stack : {&trunk, &classifier, &decoder})
        for (auto& l : *stack)
            for (auto& p : l.named_params()) out.push_back(p);
    return out;
}

std::vector<std::pair<std::string, Tensor*>> Network::named_state() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (auto* stack : {&trunk, &classifier, &decoder})
        for (auto& l : *stack)
            for (auto& p : l.named_state()) out.push_back(p);
    return out;
}

std::vector<Tensor*> Network::parameters() {
    std::vector<Tensor*> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
}

void Network::set_trainable(bool on) {
    for (auto* t : parameters()) t->set_requires_grad(on);
}

Network Network::clone() const {
    Network c;
    c.input_shape = input_shape;
    c.trunk = trunk;
    c.classifier = classifier;
    c.decoder = decoder;
    c.probes = probes;
    for (auto& [name, t] : c.named_state())
        if (t->defined()) *t = t->clone();
    return c;
}

std::vector<std::string> Network::param_layer_names() const {
    std::vector<std::string> out;
    for (const auto* stack : {&trunk, &classifier})
        for (const auto& l : *stack)
            if (l.has_params()) out.push_back(l.name);
    return out;
}

Layer* Network::find_layer(const std::string& name) {
    for (auto* stack : {&trunk, &classifier, &decoder})
        for (auto& l : *stack)
            if (l.name == name) return &l;
    return nullptr;
}

void Network::reinit_layer(const std::string& name, Rng& rng) {
    if (name == "all") {
        // untrained control: every layer back to its init state
        for (auto* stack : {&trunk, &classifier, &decoder})
            for (auto& l : *stack)
                if (l.has_params()) l.init(l.in_shape, rng);
        return;
    }
    Layer* l = find_layer(name);
    if (!l) throw std::invalid_argument("reinit_layer: no layer named '" + name + "'");
    if (l->spec.kind == LayerKind::BatchNorm) {
        // surgery on a batchnorm layer re-initializes its parameters; the
        // running statistics are accumulated data state, not weights
        l->gamma = Tensor::ones({l->gamma.dim(0)});
        l->beta = Tensor::zeros({l->beta.dim(0)});
        return;
    }
    l->init(l->in_shape, rng);
}

void Network::save_checkpoint(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint '" + path + "': cannot open for writing");
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    write_raw(os, kCheckpointVersion);
    auto entries = const_cast<Network*>(this)->named_state();
    write_raw(os, static_cast<std::uint64_t>(entries.size()));
    for (auto& [name, t] : entries) {
        write_raw(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_raw(os, static_cast<std::uint32_t>(t->ndim()));
        for (std::size_t i = 0; i < t->ndim(); ++i) write_raw(os, static_cast<std::uint64_t>(t->dim(i)));
        auto d = t->data();
        os.write(reinterpret_cast<const char*>(d.data()),
                 static_cast<std::streamsize>(d.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("checkpoint '" + path + "': write failed");
}

void Network::load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint '" + path + "': cannot open");
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw std::runtime_error("checkpoint '" + path + "': bad magic");
    std::uint32_t version = 0;
    read_raw(is, version, path);
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint '" + path + "': unsupported version " +
                                 std::to_string(version));
    std::uint64_t count = 0;
    read_raw(is, count, path);
    auto entries = named_state();
    if (count != entries.size())
        throw std::runtime_error("checkpoint '" + path + "': has " + std::to_string(count) +
                                 " tensors, network expects " + std::to_string(entries.size()));
    for (auto& [name, t] : entries) {
        std::uint32_t nlen = 0;
        read_raw(is, nlen, path);
        std::string fname(nlen, '\0');
        is.read(fname.data(), nlen);
        if (!is) throw std::runtime_error("checkpoint '" + path + "': truncated file");
        if (fname != name)
            throw std::runtime_error("checkpoint '" + path + "': tensor '" + fname +
                                     "' does not match expected '" + name + "'");
        std::uint32_t nd = 0;
        read_raw(is, nd, path);
        Shape s(nd);
        for (auto& d : s) {
            std::uint64_t v = 0;
            read_raw(is, v, path);
            d = static_cast<std::int64_t>(v);
        }
        if (s != t->shape())
            throw std::runtime_error("checkpoint '" + path + "': tensor '" + name + "' has shape " +
                                     shape_str(s) + ", expected " + shape_str(t->shape()));
        const bool trainable = t->requires_grad();
        *t = Tensor::zeros(s);
        auto d = t->mutable_data();
        is.read(reinterpret_cast<char*>(d.data()),
                static_cast<std::streamsize>(d.size() * sizeof(double)));
        if (!is) throw std::runtime_error("checkpoint '" + path + "': truncated tensor data");
        if (trainable) t->set_requires_grad(true);
    }
}

}  // namespace embattr
