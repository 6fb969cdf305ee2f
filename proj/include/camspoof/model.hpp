#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "camspoof/classifier.hpp"
#include "camspoof/tape.hpp"
#include "camspoof/tensor.hpp"

namespace camspoof {

// Densely connected patch classifier: stem conv, num_blocks blocks whose
// layers each contribute growth_rate channels to the concatenated state,
// a 1x1-conv + pool transition between blocks, then global average pool,
// a dense layer and softmax.
struct ModelConfig {
    int num_classes = 4;
    int input_hw = 32;  // square input, 3 channels
    int num_blocks = 2;
    int layers_per_block = 3;
    int growth_rate = 12;
    int initial_channels = 16;
    std::uint64_t seed = 0;

    void validate() const;
    // stem + block layers + transitions
    int total_conv_layers() const;

    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
};

// Parameter names with their config-derived shapes, in storage order.
std::vector<std::pair<std::string, Shape>> parameter_spec(const ModelConfig& config);

struct Model {
    ModelConfig config;
    std::vector<std::pair<std::string, Tensor>> parameters;

    const Tensor& parameter(const std::string& name) const;
    Tensor& parameter(const std::string& name);
};

Model build_model(const ModelConfig& config);

struct ForwardGraph {
    NodeId image;
    NodeId logits;
    NodeId probs;
    std::vector<NodeId> params;  // aligned with Model::parameters
};

// Appends the model's forward pass for a [N,3,H,W] batch to the tape.
ForwardGraph build_forward(Tape& tape, const Model& model, Tensor batch);

// Softmax outputs for a batch with pixels in [0,1]; out-of-range input is
// rejected.
Tensor forward_probs(const Model& model, const Tensor& batch);

// d loss / d patch for one [3,H,W] patch and a label.
Tensor input_gradient(const Model& model, const Tensor& patch, int label);

// Probability Jacobian [num_classes, numel(patch)], one backward per class.
Tensor class_jacobian(const Model& model, const Tensor& patch);

struct Example {
    Tensor pixels;  // [3,H,W] in [0,1]
    int label = 0;
};

struct TrainOptions {
    int epochs = 10;
    int batch_size = 64;
    double lr = 1e-4;
    std::uint64_t seed = 0;
};

struct EpochStats {
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
};

struct TrainResult {
    Model model;  // snapshot of the epoch with the smallest validation loss
    std::vector<EpochStats> history;
    int best_epoch = -1;  // 0-based into history
};

TrainResult train(const Model& model, const std::vector<Example>& train_set,
                  const std::vector<Example>& val_set, const TrainOptions& options);

struct EvalStats {
    double loss = 0.0;
    double accuracy = 0.0;
};

EvalStats evaluate_examples(const Model& model, const std::vector<Example>& set,
                            int batch_size = 64);

struct TrainingMeta {
    int epochs = 0;
    int best_epoch = -1;
    double final_train_loss = 0.0;
    double final_val_loss = 0.0;
};

// Binary checkpoint: "CMID" magic, u32 version, length-prefixed JSON header
// (config + training metadata), then per-parameter records of
// length-prefixed name, u32 rank, u32 extents and raw little-endian f32.
void save_checkpoint(const Model& model, const TrainingMeta& meta, const std::string& path);
Model load_checkpoint(const std::string& path, TrainingMeta* meta = nullptr);

// Classifier adapter over a trained model.
class ModelClassifier final : public Classifier {
  public:
    explicit ModelClassifier(const Model& model) : model_(&model) {}
    int num_classes() const override { return model_->config.num_classes; }
    Tensor probs(const Tensor& x) const override;
    Tensor loss_input_gradient(const Tensor& x, int label) const override;
    Tensor jacobian(const Tensor& x) const override;

  private:
    const Model* model_;
};

}  // namespace camspoof
