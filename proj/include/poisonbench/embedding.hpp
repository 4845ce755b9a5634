#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "poisonbench/errors.hpp"
#include "poisonbench/rng.hpp"
#include "poisonbench/tensor.hpp"

namespace poisonbench {

using Embedding = std::vector<double>;

enum class EncoderKind { Linear, LinearTanh, HashedBowText };

inline std::string to_string(EncoderKind k) {
    switch (k) {
        case EncoderKind::Linear: return "linear";
        case EncoderKind::LinearTanh: return "linear-tanh";
        case EncoderKind::HashedBowText: return "hashed-bow-text";
    }
    throw ConfigError("encoder: unknown kind");
}

inline EncoderKind encoder_kind_from_string(std::string_view s) {
    if (s == "linear") return EncoderKind::Linear;
    if (s == "linear-tanh") return EncoderKind::LinearTanh;
    if (s == "hashed-bow-text") return EncoderKind::HashedBowText;
    throw ConfigError("encoder: unknown kind '" + std::string(s) + "'");
}

struct EncoderSpec {
    EncoderKind kind = EncoderKind::Linear;
    int input_dim = 0;
    int embed_dim = 0;
    std::uint64_t seed = 0;
};

/// Lowercase whitespace tokenization, shared by the text encoder, the
/// bigram perplexity model and the token-Jaccard stealth proxy.
inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!current.empty()) tokens.push_back(std::move(current));
            current.clear();
        } else {
            current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
    }
    if (!current.empty()) tokens.push_back(std::move(current));
    return tokens;
}

inline double cosine_similarity(const Embedding& a, const Embedding& b) {
    if (a.size() != b.size())
        throw DimensionError("cosine_similarity: dimension mismatch");
    double dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    return std::clamp(dot, -1.0, 1.0);
}

/// Deterministic seeded encoder. Weights are drawn once from a standard
/// normal generator scaled by 1/sqrt(input_dim) and quantized to float32
/// so serialization round-trips bit-exactly.
class Encoder {
public:
    static Encoder build(const EncoderSpec& spec) {
        if (spec.input_dim <= 0 || spec.embed_dim <= 0)
            throw ConfigError("encoder: dimensions must be positive");
        Encoder enc;
        enc.spec_ = spec;
        enc.weights_.resize(static_cast_size(spec.embed_dim) * static_cast_size(spec.input_dim));
        Rng rng(spec.seed);
        std::normal_distribution<double> normal(0.0, 1.0);
        const double scale = 1.0 / std::sqrt(static_cast<double>(spec.input_dim));
        for (float& w : enc.weights_)
            w = static_cast<float>(normal(rng) * scale);
        return enc;
    }

    /// Test-only constructor with explicit weights (row-major embed_dim x input_dim).
    static Encoder with_weights(const EncoderSpec& spec, std::vector<float> weights) {
        if (weights.size() != static_cast_size(spec.embed_dim) * static_cast_size(spec.input_dim))
            throw DimensionError("encoder: weight count does not match dims");
        Encoder enc;
        enc.spec_ = spec;
        enc.weights_ = std::move(weights);
        return enc;
    }

    const EncoderSpec& spec() const { return spec_; }
    std::span<const float> weights() const { return weights_; }

    /// f on a raw input vector (pixels for image kinds, bucket counts for text).
    Embedding embed_raw(std::span<const double> input) const {
        if (static_cast<int>(input.size()) != spec_.input_dim)
            throw DimensionError("encoder: input length does not match input_dim");
        Embedding pre = project(input);
        if (spec_.kind == EncoderKind::LinearTanh)
            for (double& v : pre) v = std::tanh(v);
        normalize(pre);
        return pre;
    }

    Embedding embed_image(const ImageTensor& image) const {
        if (spec_.kind == EncoderKind::HashedBowText)
            throw ConfigError("encoder: text encoder cannot embed images");
        if (image.pixel_count() != spec_.input_dim ||
            static_cast<int>(image.data.size()) != spec_.input_dim)
            throw DimensionError("encoder: image geometry does not match input_dim");
        return embed_raw(image.data);
    }

    Embedding embed_text(std::string_view document) const {
        if (spec_.kind != EncoderKind::HashedBowText)
            throw ConfigError("encoder: embed_text requires a hashed-bow-text encoder");
        const std::vector<std::string> tokens = tokenize(document);
        if (tokens.empty())
            throw EmptyInputError("encoder: document empty after tokenization");
        std::vector<double> counts(static_cast<std::size_t>(spec_.input_dim), 0.0);
        for (const std::string& tok : tokens)
            counts[fnv1a64(tok) % static_cast<std::uint64_t>(spec_.input_dim)] += 1.0;
        return embed_raw(counts);
    }

    /// Exact gradient of cos(f(x), target) with respect to each pixel.
    /// Linear kind, u = W v:   grad = W^T (t/|u| - (u.t/|u|^3) u)
    /// Linear-tanh chains the elementwise (1 - tanh^2) factor.
    std::vector<double> grad_cosine_raw(std::span<const double> input, const Embedding& target) const {
        if (spec_.kind == EncoderKind::HashedBowText)
            throw ConfigError("encoder: no pixel gradient for text encoders");
        if (static_cast<int>(input.size()) != spec_.input_dim)
            throw DimensionError("encoder: input length does not match input_dim");
        if (static_cast<int>(target.size()) != spec_.embed_dim)
            throw DimensionError("encoder: target length does not match embed_dim");

        Embedding z = project(input);
        Embedding u = z;
        if (spec_.kind == EncoderKind::LinearTanh)
            for (double& v : u) v = std::tanh(v);

        double norm_sq = 0.0, dot = 0.0;
        for (int j = 0; j < spec_.embed_dim; ++j) {
            norm_sq += u[static_cast<std::size_t>(j)] * u[static_cast<std::size_t>(j)];
            dot += u[static_cast<std::size_t>(j)] * target[static_cast<std::size_t>(j)];
        }
        const double norm = std::sqrt(norm_sq);
        if (norm < kNormEpsilon)
            throw SingularityError("encoder: zero pre-normalization vector in gradient");

        // d cos / d u_j, then the tanh chain factor where applicable.
        Embedding dl_du(static_cast<std::size_t>(spec_.embed_dim));
        const double inv_norm = 1.0 / norm;
        const double inv_norm3 = inv_norm * inv_norm * inv_norm;
        for (int j = 0; j < spec_.embed_dim; ++j) {
            const auto sj = static_cast<std::size_t>(j);
            dl_du[sj] = target[sj] * inv_norm - dot * inv_norm3 * u[sj];
            if (spec_.kind == EncoderKind::LinearTanh)
                dl_du[sj] *= 1.0 - u[sj] * u[sj]; // u_j = tanh(z_j)
        }

        std::vector<double> grad(static_cast<std::size_t>(spec_.input_dim), 0.0);
        for (int j = 0; j < spec_.embed_dim; ++j) {
            const double g = dl_du[static_cast<std::size_t>(j)];
            const float* row = weights_.data() + static_cast_size(j) * static_cast_size(spec_.input_dim);
            for (int i = 0; i < spec_.input_dim; ++i)
                grad[static_cast<std::size_t>(i)] += g * static_cast<double>(row[i]);
        }
        return grad;
    }

    std::vector<double> grad_cosine_wrt_pixels(const ImageTensor& image, const Embedding& target) const {
        if (image.pixel_count() != spec_.input_dim)
            throw DimensionError("encoder: image geometry does not match input_dim");
        return grad_cosine_raw(image.data, target);
    }

    void save_weights(const std::filesystem::path& path) const {
        std::vector<double> as_double(weights_.begin(), weights_.end());
        write_f32_blob(path, as_double);
    }

    static Encoder load_weights(const EncoderSpec& spec, const std::filesystem::path& path) {
        std::vector<double> values = read_f32_blob(path);
        if (values.size() != static_cast_size(spec.embed_dim) * static_cast_size(spec.input_dim))
            throw FormatError("encoder: weight count in file does not match spec dims");
        return with_weights(spec, std::vector<float>(values.begin(), values.end()));
    }

private:
    static constexpr double kNormEpsilon = 1e-300;

    static std::size_t static_cast_size(int v) { return static_cast<std::size_t>(v); }

    Embedding project(std::span<const double> input) const {
        Embedding out(static_cast<std::size_t>(spec_.embed_dim), 0.0);
        for (int j = 0; j < spec_.embed_dim; ++j) {
            const float* row = weights_.data() + static_cast_size(j) * static_cast_size(spec_.input_dim);
            double acc = 0.0;
            for (int i = 0; i < spec_.input_dim; ++i)
                acc += static_cast<double>(row[i]) * input[static_cast<std::size_t>(i)];
            out[static_cast<std::size_t>(j)] = acc;
        }
        return out;
    }

    static void normalize(Embedding& v) {
        double norm_sq = 0.0;
        for (double x : v) norm_sq += x * x;
        const double norm = std::sqrt(norm_sq);
        if (norm < kNormEpsilon)
            throw SingularityError("encoder: cannot normalize zero vector");
        for (double& x : v) x /= norm;
    }

    EncoderSpec spec_;
    std::vector<float> weights_;
};

inline Encoder build_encoder(const EncoderSpec& spec) { return Encoder::build(spec); }

} // namespace poisonbench
