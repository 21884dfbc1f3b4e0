#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rarequery/tilestore.hpp"

namespace rarequery {

inline constexpr double kProbabilityClamp = 1e-7;

/// Block-mean pooling to pool x pool per channel, plus four whole-block
/// summaries, feeding one tanh hidden layer and a sigmoid output.
/// hidden == 0 gives plain logistic regression on the same features.
struct Architecture {
    std::size_t pool = 8;
    std::size_t hidden = 32;
    friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct ClassifierConfig {
    std::size_t batch_size = 10;
    // Reference default; the small reference model typically runs at 1e-2 (see
    // ExperimentConfig), which is recorded alongside every result.
    double learning_rate = 1e-4;
    std::size_t epochs = 10;
    double decision_threshold = 0.5;
    Architecture architecture;
    std::uint64_t init_seed = 0;

    void validate() const;
};

struct FeatureMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> values;

    std::span<const float> row(std::size_t i) const { return {values.data() + i * cols, cols}; }
};

std::size_t feature_count(std::size_t channels, const Architecture& arch);

/// Features of one block; `scale` maps raw pixels into [0, 1].
std::vector<float> block_features(std::span<const float> block, std::size_t height, std::size_t width,
                                  std::size_t channels, float scale, const Architecture& arch);

/// Per-tileset scale for a modality: its maximum pixel value (1 when nonpositive).
float feature_scale(const ModalityBlock& block);

/// Block features of every tile, scaled by the per-tileset modality maximum.
FeatureMatrix extract_features(const Tileset& tileset, std::string_view modality, const Architecture& arch);

struct ClassifierState {
    Architecture architecture;
    std::size_t input_size = 0;
    std::vector<double> parameters;
    std::vector<double> first_moment;
    std::vector<double> second_moment;
    std::uint64_t step = 0;
    // Parameters at construction; shared and never modified.
    std::shared_ptr<const std::vector<double>> initial_snapshot;

    friend bool operator==(const ClassifierState& a, const ClassifierState& b) {
        return a.architecture == b.architecture && a.input_size == b.input_size && a.parameters == b.parameters &&
               a.first_moment == b.first_moment && a.second_moment == b.second_moment && a.step == b.step &&
               *a.initial_snapshot == *b.initial_snapshot;
    }
};

std::size_t parameter_count(std::size_t input_size, const Architecture& arch);

/// Hidden weights Xavier-uniform from config.init_seed; output layer zero, so a
/// fresh classifier predicts exactly 0.5.
ClassifierState make_classifier(std::size_t input_size, const ClassifierConfig& config);

double logit(const ClassifierState& state, std::span<const float> features);
double sigmoid(double z);
double predict_proba(const ClassifierState& state, std::span<const float> features);
double predict_proba(const ClassifierState& state, const Tileset& tileset, TileId id, std::string_view modality);

struct Example {
    std::span<const float> features;
    double label = 0.0;  // 1 positive, 0 negative
};

/// Mean binary cross entropy with probabilities clamped to [1e-7, 1 - 1e-7].
double bce_loss(std::span<const double> probabilities, std::span<const double> labels);
double loss(const ClassifierState& state, std::span<const Example> batch);

/// Analytic gradient of the mean clamped BCE with respect to the parameters.
std::vector<double> gradient(const ClassifierState& state, std::span<const Example> batch);

/// Mini-batch Adam (0.9, 0.999, 1e-8, bias-corrected) over `epochs` shuffled
/// passes. Throws TrainingDiverged on a non-finite loss.
ClassifierState train(ClassifierState state, std::span<const Example> examples, const ClassifierConfig& config,
                      std::uint64_t shuffle_seed);

ClassifierState reset(ClassifierState state);

/// JSON envelope holding a float32 parameter blob plus the bound modality.
struct ModelFile {
    std::string modality;
    double decision_threshold = 0.5;
    ClassifierState state;
};
void save_model(const ModelFile& model, const std::filesystem::path& path);
ModelFile load_model(const std::filesystem::path& path);

}  // namespace rarequery
