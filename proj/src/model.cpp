#include "camspoof/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "camspoof/adam.hpp"
#include "camspoof/rng.hpp"

namespace camspoof {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'C', 'M', 'I', 'D'};
constexpr std::uint32_t kVersion = 1;

int pool_count(const ModelConfig& c) { return c.num_blocks - 1; }

}  // namespace

void ModelConfig::validate() const {
    if (num_classes < 2) {
        throw std::invalid_argument("model config: num_classes must be >= 2");
    }
    if (num_blocks < 1 || layers_per_block < 1 || growth_rate < 1 || initial_channels < 1) {
        throw std::invalid_argument(
            "model config: blocks, layers_per_block, growth_rate and initial_channels must be >= 1");
    }
    if (input_hw < 2) {
        throw std::invalid_argument("model config: input_hw must be >= 2");
    }
    const int factor = 1 << (num_blocks - 1);
    if (input_hw % factor != 0) {
        throw std::invalid_argument("model config: input_hw " + std::to_string(input_hw) +
                                    " is not divisible by the " + std::to_string(factor) +
                                    " pooling factor of " + std::to_string(num_blocks) +
                                    " blocks");
    }
}

int ModelConfig::total_conv_layers() const {
    return 1 + num_blocks * layers_per_block + pool_count(*this);
}

std::string ModelConfig::to_json() const {
    nlohmann::json j;
    j["num_classes"] = num_classes;
    j["input_hw"] = input_hw;
    j["num_blocks"] = num_blocks;
    j["layers_per_block"] = layers_per_block;
    j["growth_rate"] = growth_rate;
    j["initial_channels"] = initial_channels;
    j["seed"] = std::to_string(seed);
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    ModelConfig c;
    c.num_classes = j.at("num_classes").get<int>();
    c.input_hw = j.at("input_hw").get<int>();
    c.num_blocks = j.at("num_blocks").get<int>();
    c.layers_per_block = j.at("layers_per_block").get<int>();
    c.growth_rate = j.at("growth_rate").get<int>();
    c.initial_channels = j.at("initial_channels").get<int>();
    c.seed = std::stoull(j.at("seed").get<std::string>());
    c.validate();
    return c;
}

std::vector<std::pair<std::string, Shape>> parameter_spec(const ModelConfig& config) {
    config.validate();
    std::vector<std::pair<std::string, Shape>> spec;
    spec.emplace_back("stem.kernel", Shape{config.initial_channels, 3, 3, 3});
    spec.emplace_back("stem.bias", Shape{config.initial_channels});
    int channels = config.initial_channels;
    for (int b = 1; b <= config.num_blocks; ++b) {
        for (int l = 1; l <= config.layers_per_block; ++l) {
            const std::string base = "block" + std::to_string(b) + ".layer" + std::to_string(l);
            spec.emplace_back(base + ".kernel", Shape{config.growth_rate, channels, 3, 3});
            spec.emplace_back(base + ".bias", Shape{config.growth_rate});
            channels += config.growth_rate;
        }
        if (b < config.num_blocks) {
            const int halved = channels / 2;
            const std::string base = "trans" + std::to_string(b);
            spec.emplace_back(base + ".kernel", Shape{halved, channels, 1, 1});
            spec.emplace_back(base + ".bias", Shape{halved});
            channels = halved;
        }
    }
    spec.emplace_back("fc.weight", Shape{channels, config.num_classes});
    spec.emplace_back("fc.bias", Shape{config.num_classes});
    return spec;
}

const Tensor& Model::parameter(const std::string& name) const {
    for (const auto& [n, t] : parameters) {
        if (n == name) return t;
    }
    throw std::invalid_argument("model has no parameter named " + name);
}

Tensor& Model::parameter(const std::string& name) {
    for (auto& [n, t] : parameters) {
        if (n == name) return t;
    }
    throw std::invalid_argument("model has no parameter named " + name);
}

Model build_model(const ModelConfig& config) {
    config.validate();
    Model model;
    model.config = config;
    Rng rng(sub_seed(config.seed, "init"));
    for (auto& [name, shape] : parameter_spec(config)) {
        Tensor t(shape);
        const bool is_weight = name.ends_with(".kernel") || name.ends_with(".weight");
        if (is_weight) {
            // He fan-in scaling: kernels [F,C,kh,kw] and dense [D,M].
            std::int64_t fan_in = 1;
            for (std::size_t a = 1; a < shape.size(); ++a) fan_in *= shape[a];
            if (shape.size() == 2) fan_in = shape[0];
            const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
            for (std::int64_t i = 0; i < t.size(); ++i) {
                t[i] = static_cast<float>(stddev * rng.normal());
            }
        }
        model.parameters.emplace_back(name, std::move(t));
    }
    return model;
}

ForwardGraph build_forward(Tape& tape, const Model& model, Tensor batch) {
    const ModelConfig& c = model.config;
    if (batch.rank() != 4 || batch.extent(1) != 3 || batch.extent(2) != c.input_hw ||
        batch.extent(3) != c.input_hw) {
        throw std::invalid_argument("model expects batch [N,3," + std::to_string(c.input_hw) +
                                    "," + std::to_string(c.input_hw) + "], got " +
                                    shape_to_string(batch.shape()));
    }
    ForwardGraph g;
    g.image = tape.input(std::move(batch));
    g.params.reserve(model.parameters.size());
    std::size_t next = 0;
    auto take = [&](const std::string& name) {
        const auto& [n, t] = model.parameters[next];
        if (n != name) {
            throw std::invalid_argument("parameter order mismatch: expected " + name + ", found " +
                                        n);
        }
        ++next;
        g.params.push_back(tape.input(t));
        return g.params.back();
    };

    NodeId k = take("stem.kernel");
    NodeId b = take("stem.bias");
    NodeId state = tape.conv2d(g.image, k, b, Padding::Same);
    for (int blk = 1; blk <= c.num_blocks; ++blk) {
        for (int l = 1; l <= c.layers_per_block; ++l) {
            const std::string base = "block" + std::to_string(blk) + ".layer" + std::to_string(l);
            NodeId lk = take(base + ".kernel");
            NodeId lb = take(base + ".bias");
            NodeId fresh = tape.conv2d(tape.relu(state), lk, lb, Padding::Same);
            state = tape.concat_channels(state, fresh);
        }
        if (blk < c.num_blocks) {
            const std::string base = "trans" + std::to_string(blk);
            NodeId tk = take(base + ".kernel");
            NodeId tb = take(base + ".bias");
            state = tape.avg_pool2d(tape.conv2d(state, tk, tb, Padding::Same));
        }
    }
    NodeId feats = tape.mean_spatial(state);
    NodeId fw = take("fc.weight");
    NodeId fb = take("fc.bias");
    g.logits = tape.dense(feats, fw, fb);
    g.probs = tape.softmax(g.logits);
    return g;
}

Tensor forward_probs(const Model& model, const Tensor& batch) {
    for (std::int64_t i = 0; i < batch.size(); ++i) {
        if (batch[i] < 0.0f || batch[i] > 1.0f) {
            throw std::invalid_argument("forward_probs: pixel value " + std::to_string(batch[i]) +
                                        " outside [0,1]");
        }
    }
    Tape tape;
    ForwardGraph g = build_forward(tape, model, batch);
    return tape.value(g.probs);
}

Tensor input_gradient(const Model& model, const Tensor& patch, int label) {
    if (label < 0 || label >= model.config.num_classes) {
        throw std::invalid_argument("input_gradient label " + std::to_string(label) +
                                    " outside [0," + std::to_string(model.config.num_classes) +
                                    ")");
    }
    const Shape original = patch.shape();
    Tape tape;
    ForwardGraph g = build_forward(
        tape, model, patch.reshaped(Shape{1, 3, model.config.input_hw, model.config.input_hw}));
    NodeId loss = tape.cross_entropy(g.probs, {label});
    auto grads = tape.backward(loss, {g.image});
    return grads.at(g.image).reshaped(original);
}

Tensor class_jacobian(const Model& model, const Tensor& patch) {
    const int k = model.config.num_classes;
    Tape tape;
    ForwardGraph g = build_forward(
        tape, model, patch.reshaped(Shape{1, 3, model.config.input_hw, model.config.input_hw}));
    Tensor jac(Shape{k, static_cast<int>(patch.size())});
    for (int j = 0; j < k; ++j) {
        Tensor onehot(Shape{1, k});
        onehot[j] = 1.0f;
        NodeId picked = tape.sum_all(tape.mul(g.probs, tape.input(std::move(onehot))));
        auto grads = tape.backward(picked, {g.image});
        const Tensor& row = grads.at(g.image);
        std::copy_n(row.data(), row.size(), jac.data() + static_cast<std::int64_t>(j) * row.size());
    }
    return jac;
}

namespace {

Tensor batch_of(const std::vector<Example>& set, const std::vector<int>& order, std::size_t begin,
                std::size_t end, int hw) {
    const int b = static_cast<int>(end - begin);
    Tensor batch(Shape{b, 3, hw, hw});
    const std::int64_t stride = static_cast<std::int64_t>(3) * hw * hw;
    for (std::size_t i = begin; i < end; ++i) {
        const Example& ex = set[static_cast<std::size_t>(order[i])];
        if (ex.pixels.size() != stride) {
            throw std::invalid_argument("example pixel tensor " +
                                        shape_to_string(ex.pixels.shape()) +
                                        " does not match model input");
        }
        std::copy_n(ex.pixels.data(), stride,
                    batch.data() + static_cast<std::int64_t>(i - begin) * stride);
    }
    return batch;
}

struct SetStats {
    double loss = 0.0;
    double accuracy = 0.0;
};

SetStats evaluate_set(const Model& model, const std::vector<Example>& set, int batch_size) {
    SetStats stats;
    std::vector<int> order(set.size());
    std::iota(order.begin(), order.end(), 0);
    double loss_sum = 0.0;
    std::int64_t correct = 0;
    for (std::size_t begin = 0; begin < set.size(); begin += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(set.size(), begin + static_cast<std::size_t>(batch_size));
        Tape tape;
        ForwardGraph g =
            build_forward(tape, model, batch_of(set, order, begin, end, model.config.input_hw));
        const Tensor& probs = tape.value(g.probs);
        const int k = model.config.num_classes;
        for (std::size_t i = begin; i < end; ++i) {
            const float* row = probs.data() + static_cast<std::int64_t>(i - begin) * k;
            const int label = set[i].label;
            loss_sum -= std::log(std::max(static_cast<double>(row[label]), 1e-12));
            int arg = 0;
            for (int j = 1; j < k; ++j) {
                if (row[j] > row[arg]) arg = j;
            }
            if (arg == label) ++correct;
        }
    }
    stats.loss = loss_sum / static_cast<double>(set.size());
    stats.accuracy = static_cast<double>(correct) / static_cast<double>(set.size());
    return stats;
}

}  // namespace

EvalStats evaluate_examples(const Model& model, const std::vector<Example>& set, int batch_size) {
    if (set.empty()) {
        throw std::invalid_argument("evaluate_examples: empty set");
    }
    const SetStats stats = evaluate_set(model, set, batch_size);
    return EvalStats{stats.loss, stats.accuracy};
}

TrainResult train(const Model& model, const std::vector<Example>& train_set,
                  const std::vector<Example>& val_set, const TrainOptions& options) {
    if (train_set.empty() || val_set.empty()) {
        throw std::invalid_argument("train: training and validation sets must be non-empty");
    }
    if (options.epochs < 1 || options.batch_size < 1) {
        throw std::invalid_argument("train: epochs and batch_size must be >= 1");
    }
    const int k = model.config.num_classes;
    for (const auto* set : {&train_set, &val_set}) {
        for (const Example& ex : *set) {
            if (ex.label < 0 || ex.label >= k) {
                throw std::invalid_argument("train: label " + std::to_string(ex.label) +
                                            " outside [0," + std::to_string(k) + ")");
            }
        }
    }

    Model work = model;
    AdamState adam;
    adam.lr = options.lr;
    Rng rng(sub_seed(options.seed, "train"));

    TrainResult result;
    result.model = model;
    double best_val = std::numeric_limits<double>::infinity();

    std::vector<int> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < options.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        for (std::size_t begin = 0; begin < train_set.size();
             begin += static_cast<std::size_t>(options.batch_size)) {
            const std::size_t end =
                std::min(train_set.size(), begin + static_cast<std::size_t>(options.batch_size));
            std::vector<int> labels;
            labels.reserve(end - begin);
            for (std::size_t i = begin; i < end; ++i) {
                labels.push_back(train_set[static_cast<std::size_t>(order[i])].label);
            }
            Tape tape;
            ForwardGraph g = build_forward(
                tape, work, batch_of(train_set, order, begin, end, work.config.input_hw));
            NodeId loss = tape.cross_entropy(g.probs, labels);
            loss_sum += static_cast<double>(tape.value(loss)[0]) *
                        static_cast<double>(end - begin);
            auto grad_map = tape.backward(loss, g.params);

            std::vector<Tensor> params;
            std::vector<Tensor> grads;
            params.reserve(work.parameters.size());
            grads.reserve(work.parameters.size());
            for (std::size_t p = 0; p < work.parameters.size(); ++p) {
                params.push_back(work.parameters[p].second);
                grads.push_back(std::move(grad_map.at(g.params[p])));
            }
            adam_step(params, grads, adam);
            for (std::size_t p = 0; p < work.parameters.size(); ++p) {
                work.parameters[p].second = std::move(params[p]);
            }
        }

        EpochStats stats;
        stats.train_loss = loss_sum / static_cast<double>(train_set.size());
        const SetStats val = evaluate_set(work, val_set, options.batch_size);
        stats.val_loss = val.loss;
        stats.val_accuracy = val.accuracy;
        result.history.push_back(stats);
        if (val.loss < best_val) {
            best_val = val.loss;
            result.model = work;
            result.best_epoch = epoch;
        }
    }
    return result;
}

namespace {

void write_u32(std::ofstream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::ifstream& in, const char* what) {
    std::uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(v))) {
        throw std::runtime_error(std::string("checkpoint truncated while reading ") + what);
    }
    return v;
}

}  // namespace

void save_checkpoint(const Model& model, const TrainingMeta& meta, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot open checkpoint for writing: " + path);
    }
    nlohmann::json header;
    header["config"] = nlohmann::json::parse(model.config.to_json());
    header["training"] = {{"epochs", meta.epochs},
                          {"best_epoch", meta.best_epoch},
                          {"final_train_loss", meta.final_train_loss},
                          {"final_val_loss", meta.final_val_loss}};
    const std::string text = header.dump();

    out.write(kMagic, sizeof(kMagic));
    write_u32(out, kVersion);
    write_u32(out, static_cast<std::uint32_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, tensor] : model.parameters) {
        write_u32(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(out, static_cast<std::uint32_t>(tensor.rank()));
        for (int a = 0; a < tensor.rank(); ++a) {
            write_u32(out, static_cast<std::uint32_t>(tensor.extent(a)));
        }
        out.write(reinterpret_cast<const char*>(tensor.data()),
                  static_cast<std::streamsize>(tensor.size() * 4));
    }
    if (!out) {
        throw std::runtime_error("failed writing checkpoint: " + path);
    }
}

Model load_checkpoint(const std::string& path, TrainingMeta* meta) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open checkpoint: " + path);
    }
    char magic[4] = {};
    if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw std::runtime_error("not a checkpoint file (bad magic): " + path);
    }
    const std::uint32_t version = read_u32(in, "version");
    if (version != kVersion) {
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) +
                                 " (expected " + std::to_string(kVersion) + ")");
    }
    const std::uint32_t header_len = read_u32(in, "header length");
    std::string text(header_len, '\0');
    if (!in.read(text.data(), header_len)) {
        throw std::runtime_error("checkpoint truncated while reading header");
    }
    ModelConfig config;
    TrainingMeta parsed;
    try {
        nlohmann::json header = nlohmann::json::parse(text);
        config = ModelConfig::from_json(header.at("config").dump());
        const auto& t = header.at("training");
        parsed.epochs = t.at("epochs").get<int>();
        parsed.best_epoch = t.at("best_epoch").get<int>();
        parsed.final_train_loss = t.at("final_train_loss").get<double>();
        parsed.final_val_loss = t.at("final_val_loss").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("corrupt checkpoint header: ") + e.what());
    }

    Model model;
    model.config = config;
    for (const auto& [name, shape] : parameter_spec(config)) {
        const std::uint32_t name_len = read_u32(in, "parameter name length");
        std::string found(name_len, '\0');
        if (!in.read(found.data(), name_len)) {
            throw std::runtime_error("checkpoint truncated while reading parameter name");
        }
        if (found != name) {
            throw std::runtime_error("checkpoint parameter '" + found +
                                     "' does not match config-derived '" + name + "'");
        }
        const std::uint32_t rank = read_u32(in, "parameter rank");
        if (rank != shape.size()) {
            throw std::runtime_error("checkpoint parameter " + name + " has rank " +
                                     std::to_string(rank) + ", config implies " +
                                     std::to_string(shape.size()));
        }
        Shape disk_shape(rank);
        for (std::uint32_t a = 0; a < rank; ++a) {
            disk_shape[a] = static_cast<int>(read_u32(in, "parameter extent"));
        }
        if (disk_shape != shape) {
            throw std::runtime_error("checkpoint parameter " + name + " has shape " +
                                     shape_to_string(disk_shape) + ", config implies " +
                                     shape_to_string(shape));
        }
        std::vector<float> data(static_cast<std::size_t>(shape_numel(shape)));
        if (!in.read(reinterpret_cast<char*>(data.data()),
                     static_cast<std::streamsize>(data.size() * 4))) {
            throw std::runtime_error("checkpoint truncated in payload of " + name);
        }
        model.parameters.emplace_back(name, Tensor(shape, std::move(data)));
    }
    if (in.peek() != std::ifstream::traits_type::eof()) {
        throw std::runtime_error("checkpoint has trailing data: " + path);
    }
    if (meta) *meta = parsed;
    return model;
}

Tensor ModelClassifier::probs(const Tensor& x) const {
    const int hw = model_->config.input_hw;
    Tensor batch = x.reshaped(Shape{1, 3, hw, hw});
    Tensor out = forward_probs(*model_, batch);
    return out.reshaped(Shape{model_->config.num_classes});
}

Tensor ModelClassifier::loss_input_gradient(const Tensor& x, int label) const {
    return input_gradient(*model_, x, label);
}

Tensor ModelClassifier::jacobian(const Tensor& x) const { return class_jacobian(*model_, x); }

}  // namespace camspoof
