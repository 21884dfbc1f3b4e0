#include "rarequery/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <json.hpp>
#include <numeric>
#include <random>

#include "rarequery/encoding.hpp"
#include "rarequery/tileset_io.hpp"

namespace rarequery {

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEpsilon = 1e-8;

// Parameter layout: W1 (hidden x in, row-major), b1 (hidden), w2 (hidden), b2.
// Logistic mode: w (in), b.
struct Layout {
    std::size_t in, hidden;
    std::size_t w1() const { return 0; }
    std::size_t b1() const { return hidden * in; }
    std::size_t w2() const { return b1() + hidden; }
    std::size_t b2() const { return hidden == 0 ? in : w2() + hidden; }
};

Layout layout_of(const ClassifierState& s) { return {s.input_size, s.architecture.hidden}; }

double clamp_probability(double p) { return std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp); }

double sample_loss(double p, double y) {
    const double pc = clamp_probability(p);
    return -(y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc));
}

// Forward pass; fills `hidden` with activations when the model has a hidden layer.
double forward(const ClassifierState& s, std::span<const float> x, std::vector<double>& hidden) {
    const Layout L = layout_of(s);
    const auto& w = s.parameters;
    if (L.hidden == 0) {
        double z = w[L.b2()];
        for (std::size_t i = 0; i < L.in; ++i) z += w[i] * x[i];
        return z;
    }
    hidden.resize(L.hidden);
    double z = w[L.b2()];
    for (std::size_t h = 0; h < L.hidden; ++h) {
        const double* row = &w[L.w1() + h * L.in];
        double a = w[L.b1() + h];
        for (std::size_t i = 0; i < L.in; ++i) a += row[i] * x[i];
        hidden[h] = std::tanh(a);
        z += w[L.w2() + h] * hidden[h];
    }
    return z;
}

// Accumulates d(mean loss)/d(params) into grad; returns the batch's summed loss.
double accumulate_gradient(const ClassifierState& s, std::span<const Example> batch, std::vector<double>& grad) {
    const Layout L = layout_of(s);
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    std::vector<double> hidden;
    double total = 0.0;
    for (const auto& ex : batch) {
        if (ex.features.size() != L.in) throw InvalidArgument("feature vector length does not match the classifier");
        const double p = sigmoid(forward(s, ex.features, hidden));
        total += sample_loss(p, ex.label);
        // The clamp is flat outside [eps, 1 - eps].
        if (p < kProbabilityClamp || p > 1.0 - kProbabilityClamp) continue;
        const double dz = (p - ex.label) * inv_n;
        grad[L.b2()] += dz;
        if (L.hidden == 0) {
            for (std::size_t i = 0; i < L.in; ++i) grad[i] += dz * ex.features[i];
            continue;
        }
        for (std::size_t h = 0; h < L.hidden; ++h) {
            grad[L.w2() + h] += dz * hidden[h];
            const double da = dz * s.parameters[L.w2() + h] * (1.0 - hidden[h] * hidden[h]);
            if (da == 0.0) continue;
            grad[L.b1() + h] += da;
            double* row = &grad[L.w1() + h * L.in];
            for (std::size_t i = 0; i < L.in; ++i) row[i] += da * ex.features[i];
        }
    }
    return total;
}

}  // namespace

void ClassifierConfig::validate() const {
    if (batch_size < 1) throw InvalidArgument("batch size must be at least 1");
    if (!(decision_threshold > 0.0 && decision_threshold < 1.0))
        throw InvalidArgument("decision threshold must lie in (0, 1)");
    if (!(learning_rate > 0.0)) throw InvalidArgument("learning rate must be positive");
    if (architecture.pool < 1) throw InvalidArgument("pooling size must be at least 1");
}

std::size_t feature_count(std::size_t channels, const Architecture& arch) {
    return channels * arch.pool * arch.pool + 4;
}

std::vector<float> block_features(std::span<const float> block, std::size_t height, std::size_t width,
                                  std::size_t channels, float scale, const Architecture& arch) {
    std::vector<float> out =
        resample_block(block, height, width, channels, arch.pool, arch.pool, channels);
    const double inv = 1.0 / static_cast<double>(scale);
    for (float& v : out) v = static_cast<float>(v * inv);

    double mx = -std::numeric_limits<double>::infinity(), sum = 0.0, sq = 0.0;
    for (float raw : block) {
        const double v = raw * inv;
        mx = std::max(mx, v);
        sum += v;
        sq += v * v;
    }
    const double n = static_cast<double>(block.size());
    const double mean = sum / n;
    const double var = std::max(0.0, sq / n - mean * mean);
    out.push_back(static_cast<float>(mx));
    out.push_back(static_cast<float>(mean));
    out.push_back(static_cast<float>(std::sqrt(var)));
    out.push_back(static_cast<float>(mx - mean));
    return out;
}

float feature_scale(const ModalityBlock& block) {
    const float m = block.max_value();
    return m > 0.0f ? m : 1.0f;
}

FeatureMatrix extract_features(const Tileset& ts, std::string_view modality, const Architecture& arch) {
    const ModalityBlock& b = ts.modality(modality);
    const float scale = feature_scale(b);
    FeatureMatrix fm;
    fm.rows = ts.size();
    fm.cols = feature_count(b.channels, arch);
    fm.values.reserve(fm.rows * fm.cols);
    for (const auto& t : ts.tiles) {
        const auto f = block_features(b.block(t.id), b.height, b.width, b.channels, scale, arch);
        fm.values.insert(fm.values.end(), f.begin(), f.end());
    }
    return fm;
}

std::size_t parameter_count(std::size_t input_size, const Architecture& arch) {
    if (arch.hidden == 0) return input_size + 1;
    return arch.hidden * input_size + arch.hidden + arch.hidden + 1;
}

ClassifierState make_classifier(std::size_t input_size, const ClassifierConfig& config) {
    config.validate();
    if (input_size == 0) throw InvalidArgument("classifier needs at least one input feature");
    ClassifierState s;
    s.architecture = config.architecture;
    s.input_size = input_size;
    s.parameters.assign(parameter_count(input_size, config.architecture), 0.0);
    if (config.architecture.hidden > 0) {
        std::mt19937_64 rng(config.init_seed);
        const double limit = std::sqrt(6.0 / static_cast<double>(input_size + config.architecture.hidden));
        std::uniform_real_distribution<double> dist(-limit, limit);
        for (std::size_t i = 0; i < config.architecture.hidden * input_size; ++i) s.parameters[i] = dist(rng);
    }
    s.first_moment.assign(s.parameters.size(), 0.0);
    s.second_moment.assign(s.parameters.size(), 0.0);
    s.initial_snapshot = std::make_shared<const std::vector<double>>(s.parameters);
    return s;
}

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

double logit(const ClassifierState& state, std::span<const float> features) {
    if (features.size() != state.input_size) throw InvalidArgument("feature vector length does not match the classifier");
    const Layout L = layout_of(state);
    const auto& w = state.parameters;
    double z = w[L.b2()];
    if (L.hidden == 0) {
        for (std::size_t i = 0; i < L.in; ++i) z += w[i] * features[i];
        return z;
    }
    for (std::size_t h = 0; h < L.hidden; ++h) {
        const double* row = &w[L.w1() + h * L.in];
        double a = w[L.b1() + h];
        for (std::size_t i = 0; i < L.in; ++i) a += row[i] * features[i];
        z += w[L.w2() + h] * std::tanh(a);
    }
    return z;
}

double predict_proba(const ClassifierState& state, std::span<const float> features) {
    return sigmoid(logit(state, features));
}

double predict_proba(const ClassifierState& state, const Tileset& ts, TileId id, std::string_view modality) {
    const ModalityBlock& b = ts.modality(modality);
    const auto f = block_features(b.block(id), b.height, b.width, b.channels, feature_scale(b), state.architecture);
    return predict_proba(state, f);
}

double bce_loss(std::span<const double> probabilities, std::span<const double> labels) {
    if (probabilities.size() != labels.size()) throw InvalidArgument("probabilities and labels differ in length");
    if (probabilities.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) total += sample_loss(probabilities[i], labels[i]);
    return total / static_cast<double>(labels.size());
}

double loss(const ClassifierState& state, std::span<const Example> batch) {
    if (batch.empty()) return 0.0;
    std::vector<double> p, y;
    for (const auto& ex : batch) {
        p.push_back(predict_proba(state, ex.features));
        y.push_back(ex.label);
    }
    return bce_loss(p, y);
}

std::vector<double> gradient(const ClassifierState& state, std::span<const Example> batch) {
    if (batch.empty()) throw InvalidArgument("gradient of an empty batch");
    std::vector<double> grad(state.parameters.size(), 0.0);
    accumulate_gradient(state, batch, grad);
    return grad;
}

ClassifierState train(ClassifierState s, std::span<const Example> examples, const ClassifierConfig& config,
                      std::uint64_t shuffle_seed) {
    config.validate();
    if (examples.empty()) throw InvalidArgument("cannot train on an empty labeled set");
    std::mt19937_64 rng(shuffle_seed);
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<Example> batch;
    std::vector<double> grad(s.parameters.size());
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            batch.clear();
            for (std::size_t k = start; k < std::min(order.size(), start + config.batch_size); ++k)
                batch.push_back(examples[order[k]]);
            std::fill(grad.begin(), grad.end(), 0.0);
            const double batch_loss = accumulate_gradient(s, batch, grad);
            if (!std::isfinite(batch_loss))
                throw TrainingDiverged("non-finite loss at step " + std::to_string(s.step), s.step);
            ++s.step;
            const double t = static_cast<double>(s.step);
            const double c1 = 1.0 - std::pow(kBeta1, t);
            const double c2 = 1.0 - std::pow(kBeta2, t);
            for (std::size_t i = 0; i < grad.size(); ++i) {
                s.first_moment[i] = kBeta1 * s.first_moment[i] + (1.0 - kBeta1) * grad[i];
                s.second_moment[i] = kBeta2 * s.second_moment[i] + (1.0 - kBeta2) * grad[i] * grad[i];
                const double mhat = s.first_moment[i] / c1;
                const double vhat = s.second_moment[i] / c2;
                s.parameters[i] -= config.learning_rate * mhat / (std::sqrt(vhat) + kAdamEpsilon);
            }
        }
    }
    return s;
}

ClassifierState reset(ClassifierState s) {
    s.parameters = *s.initial_snapshot;
    std::fill(s.first_moment.begin(), s.first_moment.end(), 0.0);
    std::fill(s.second_moment.begin(), s.second_moment.end(), 0.0);
    s.step = 0;
    return s;
}

void save_model(const ModelFile& model, const std::filesystem::path& path) {
    const ClassifierState& s = model.state;
    BlobHeader h;
    std::memcpy(h.magic, "RQCS", 4);
    h.dims = {2, static_cast<std::uint32_t>(s.parameters.size())};
    std::vector<float> payload;
    for (double v : *s.initial_snapshot) payload.push_back(static_cast<float>(v));
    for (double v : s.parameters) payload.push_back(static_cast<float>(v));
    nlohmann::ordered_json j = {
        {"schema_version", 1},
        {"modality", model.modality},
        {"decision_threshold", model.decision_threshold},
        {"input_size", s.input_size},
        {"architecture", {{"pool", s.architecture.pool}, {"hidden", s.architecture.hidden}}},
        {"parameters_f32_base64", base64_encode(encode_blob(h, payload))},
    };
    write_file(path, j.dump(2) + "\n");
}

ModelFile load_model(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw TilesetIoError(path.string() + ": malformed model file: " + e.what());
    }
    if (j.value("schema_version", -1) != 1) throw VersionMismatch(path.string() + ": unsupported model version");
    ModelFile m;
    m.modality = j.at("modality").get<std::string>();
    m.decision_threshold = j.at("decision_threshold").get<double>();
    ClassifierConfig cfg;
    cfg.architecture = {j.at("architecture").at("pool").get<std::size_t>(),
                        j.at("architecture").at("hidden").get<std::size_t>()};
    ClassifierState s = make_classifier(j.at("input_size").get<std::size_t>(), cfg);
    std::vector<std::uint32_t> dims;
    const auto payload =
        decode_blob(base64_decode(j.at("parameters_f32_base64").get<std::string>()), "RQCS", 2, dims, path.string());
    if (dims[0] != 2 || dims[1] != s.parameters.size())
        throw TilesetIoError(path.string() + ": parameter count does not match the architecture");
    std::vector<double> initial(payload.begin(), payload.begin() + dims[1]);
    s.parameters.assign(payload.begin() + dims[1], payload.end());
    s.initial_snapshot = std::make_shared<const std::vector<double>>(std::move(initial));
    m.state = std::move(s);
    return m;
}

}  // namespace rarequery
