#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "dot/core.hpp"
#include "dot/geometry.hpp"

namespace dot::nn {

enum class Activation : std::uint8_t { identity = 0, tanh = 1, sigmoid = 2, relu = 3 };

const char* to_string(Activation a);

/// y = act(W x + b)
struct DenseLayer {
    Matrix weights;  // out x in
    Vector biases;
    Activation activation = Activation::identity;

    Index in_dim() const { return weights.cols(); }
    Index out_dim() const { return weights.rows(); }
};

/// Affine min-max map of each feature onto [0, 1].
struct Normalization {
    Vector lo, hi;

    bool empty() const { return lo.size() == 0; }
    Matrix apply(const Matrix& x) const;
    Matrix invert(const Matrix& x) const;
    /// Per-feature bounds of the columns of `samples`.
    static Normalization per_feature(const Matrix& samples);
    /// One shared bound pair for every feature.
    static Normalization global(const Matrix& samples);
};

struct MlpNetwork {
    std::vector<DenseLayer> layers;
    Normalization input_norm;   // optional
    Normalization output_norm;  // optional

    Index input_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
    Index output_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }
    /// Throws InvalidArgument when consecutive layer shapes do not chain.
    void validate() const;
    std::size_t parameter_count() const;
};

/// Dense layers with Glorot-uniform weights and zero biases. `dims` lists the
/// input width followed by each layer's output width.
MlpNetwork make_mlp(const std::vector<Index>& dims, const std::vector<Activation>& activations,
                    std::uint64_t seed);

/// Network chaining the layers of `parts` in order.
MlpNetwork compose(const std::vector<const MlpNetwork*>& parts);

/// Pre-activations and activations of every layer for a batch (one column per sample).
struct ForwardCache {
    std::vector<Matrix> activations;  // activations[0] is the input, back() the output
    std::vector<Matrix> pre;          // pre[l] = W_l a_l + b_l
    const Matrix& output() const { return activations.back(); }
};

struct Gradients {
    std::vector<Matrix> weights;
    std::vector<Vector> biases;

    static Gradients zeros_like(const MlpNetwork& net);
    double squared_norm() const;
};

/// Raw layer evaluation (no normalization). Throws InvalidArgument on a size mismatch.
ForwardCache forward_pass(const MlpNetwork& net, const Matrix& x);
Vector evaluate(const MlpNetwork& net, const Vector& x);

/// Gradients of sum_s 1/2 |net(x_s) - t_s|^2 over the batch in `cache`.
Gradients backward_pass(const MlpNetwork& net, const ForwardCache& cache, const Matrix& target);
Gradients backward_pass(const MlpNetwork& net, const Vector& x, const Vector& target);

struct TrainConfig {
    double learning_rate = 0.1;
    int epochs = 2000;
    int batch_size = 32;
    std::uint64_t seed = 1;

    void validate() const;
};

struct TrainResult {
    /// Mean over samples of 1/2 |net(x) - t|^2, accumulated during each epoch.
    std::vector<double> loss_history;
};

/// Plain mini-batch SGD on the mean per-sample loss 1/2 |net(x) - t|^2, with a
/// seeded shuffle each epoch. Throws DivergenceError on a non-finite loss.
TrainResult train_sgd(MlpNetwork& net, const Matrix& inputs, const Matrix& targets, const TrainConfig& cfg);

/// Inputs supplied per epoch (e.g. freshly corrupted copies); the returned
/// reference must stay valid until the next call.
using EpochInputs = std::function<const Matrix&(int epoch)>;
TrainResult train_sgd(MlpNetwork& net, const EpochInputs& inputs_of_epoch, const Matrix& targets,
                      const TrainConfig& cfg);

/// Single-channel image mask of the voxel grid (rows x cols lattice).
struct ImageGeometry {
    int rows = 0;
    int cols = 0;
    std::vector<Index> pixel_of_voxel;  // voxel ordinal -> row * cols + col

    static ImageGeometry from_grid(const geometry::VoxelGrid& grid);
    Index pixels() const { return static_cast<Index>(rows) * cols; }
    Vector to_image(const Vector& voxels) const;
    Vector to_voxels(const Vector& image) const;
};

/// 'Same'-padded square convolution. Weights are out_ch x (in_ch * k * k) with
/// the kernel index running fastest.
struct ConvLayer {
    int in_channels = 1;
    int out_channels = 1;
    int kernel = 3;
    Matrix weights;
    Vector biases;
    Activation activation = Activation::relu;
};

/// Small convolutional denoiser acting on the rasterized voxel image; pixels
/// outside the domain are zeroed after every layer.
struct ConvNet {
    std::vector<ConvLayer> layers;
    ImageGeometry image;

    /// Voxel vector in, voxel vector out.
    Vector evaluate(const Vector& voxels) const;
};

ConvNet make_denoiser(const ImageGeometry& image, int channels, std::uint64_t seed);

/// Same training contract as train_sgd, over voxel-vector pairs.
TrainResult train_sgd(ConvNet& net, const Matrix& inputs, const Matrix& targets, const TrainConfig& cfg);

/// Gradient of 1/2 |net(x) - t|^2 for one sample (used by the gradient checks).
std::vector<std::pair<Matrix, Vector>> conv_gradients(const ConvNet& net, const Vector& x, const Vector& target);

struct LsvdArchitecture {
    Index latent_dim = 64;
    int bridge_layers = 7;
    Index bridge_width = 64;
    int denoiser_channels = 16;
};

enum class DataScaling : std::uint8_t { global = 0, per_feature = 1 };

struct LsvdTrainConfig {
    LsvdArchitecture arch;
    DataScaling data_scaling = DataScaling::global;
    TrainConfig data_ae{0.1, 2000, 32, 11};
    TrainConfig signal_ae{0.01, 2000, 32, 12};
    TrainConfig bridge{0.1, 2000, 32, 13};
    TrainConfig denoiser{0.001, 100, 32, 14};
    bool use_denoiser = true;
    /// 0: the denoiser learns from in-sample composed outputs. k >= 2: from
    /// out-of-fold outputs of k networks each fitted without 1/k of the phantoms.
    int denoiser_folds = 5;
    std::uint64_t init_seed = 1;
};

/// Training pairs. Column p of `inputs` is a (possibly noisy) measurement
/// vector whose clean counterpart is column p of `clean`; it was generated from
/// phantom column `phantom_of_input[p]` of `phantoms`.
struct LsvdTrainingSet {
    Matrix inputs;
    Matrix clean;
    Matrix phantoms;
    std::vector<Index> phantom_of_input;
    /// Optional fresh corruption of `clean`, same shape as `inputs`, requested
    /// once per epoch by the data-autoencoder (stage 0) and bridge (stage 2)
    /// fits. When empty those fits reuse `inputs` every epoch.
    std::function<Matrix(int stage, int epoch)> resample;

    void validate() const;
};

struct LsvdModel {
    MlpNetwork dae_encoder, dae_decoder;
    MlpNetwork sae_encoder, sae_decoder;
    MlpNetwork bridge;
    ConvNet denoiser;
    Normalization data_norm;    // raw fluence -> [0, 1]
    Normalization signal_norm;  // mu_a -> [0, 1]
    double mu_a0 = 0.0;
    double grid_radius = 0.0;
    double grid_side = 0.0;

    /// decoder(sAE) o bridge o encoder(dAE), as one network on normalized data.
    MlpNetwork composed() const;
    void validate() const;
};

struct StageReport {
    std::string stage;
    std::vector<double> loss_history;
    double wall_time = 0.0;  // seconds
};

struct LsvdTrainReport {
    std::vector<StageReport> stages;
};

/// Stages: data autoencoder (noisy -> clean), signal autoencoder, bridge on
/// frozen latent pairs, then the downstream denoiser. Errors name the stage.
LsvdModel train_lsvd(const LsvdTrainingSet& data, const geometry::VoxelGrid& grid, double mu_a0,
                     const LsvdTrainConfig& cfg, LsvdTrainReport* report = nullptr);

/// Composed network output in mu_a units, before the denoiser.
Vector reconstruct_raw(const LsvdModel& model, const Vector& measurement);
/// Full inference: normalize, encode, bridge, decode, denormalize, denoise,
/// clamp to [mu_a0, 5 mu_a0].
Vector infer(const LsvdModel& model, const Vector& measurement);

/// Binary model file, little-endian:
///   "DOTLSVD1", u32 version,
///   5 x MLP (dAE encoder, dAE decoder, sAE encoder, sAE decoder, bridge):
///       u32 layers, per layer: u32 out, u32 in, u8 activation, f64 W[out*in] row-major, f64 b[out]
///   normalization: data lo, data hi, signal lo, signal hi, each u32 n + f64[n]
///   denoiser: u32 layers, per layer: u32 out_ch, u32 in_ch, u32 k, u8 activation, f64 W row-major, f64 b
///   domain: f64 mu_a0, f64 grid radius, f64 grid side
void save_model(const std::string& path, const LsvdModel& model);
LsvdModel load_model(const std::string& path);

}  // namespace dot::nn
