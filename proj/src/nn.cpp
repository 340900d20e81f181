#include "dot/nn.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

namespace dot::nn {

const char* to_string(Activation a) {
    switch (a) {
        case Activation::identity: return "identity";
        case Activation::tanh: return "tanh";
        case Activation::sigmoid: return "sigmoid";
        case Activation::relu: return "relu";
    }
    return "unknown";
}

namespace {

Matrix activate(const Matrix& z, Activation a) {
    switch (a) {
        case Activation::identity: return z;
        case Activation::tanh: return z.array().tanh().matrix();
        case Activation::sigmoid: return (1.0 / (1.0 + (-z.array()).exp())).matrix();
        case Activation::relu: return z.cwiseMax(0.0);
    }
    return z;
}

// f'(z) expressed through z and a = f(z).
Matrix derivative(const Matrix& z, const Matrix& a, Activation act) {
    switch (act) {
        case Activation::identity: return Matrix::Ones(z.rows(), z.cols());
        case Activation::tanh: return (1.0 - a.array().square()).matrix();
        case Activation::sigmoid: return (a.array() * (1.0 - a.array())).matrix();
        case Activation::relu: return (z.array() > 0.0).cast<double>().matrix();
    }
    return Matrix::Ones(z.rows(), z.cols());
}

double span_of(double lo, double hi) { return std::max(hi - lo, 1e-12 * std::max({std::abs(lo), std::abs(hi), 1.0})); }

}  // namespace

Matrix Normalization::apply(const Matrix& x) const {
    if (empty()) return x;
    if (x.rows() != lo.size()) throw InvalidArgument("normalization dimension mismatch");
    Matrix out(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i) out.row(i) = (x.row(i).array() - lo[i]) / span_of(lo[i], hi[i]);
    return out;
}

Matrix Normalization::invert(const Matrix& x) const {
    if (empty()) return x;
    if (x.rows() != lo.size()) throw InvalidArgument("normalization dimension mismatch");
    Matrix out(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i) out.row(i) = x.row(i).array() * span_of(lo[i], hi[i]) + lo[i];
    return out;
}

Normalization Normalization::per_feature(const Matrix& samples) {
    if (samples.cols() == 0) throw InvalidArgument("normalization needs at least one sample");
    return {samples.rowwise().minCoeff(), samples.rowwise().maxCoeff()};
}

Normalization Normalization::global(const Matrix& samples) {
    if (samples.cols() == 0) throw InvalidArgument("normalization needs at least one sample");
    return {Vector::Constant(samples.rows(), samples.minCoeff()), Vector::Constant(samples.rows(), samples.maxCoeff())};
}

void MlpNetwork::validate() const {
    if (layers.empty()) throw InvalidArgument("network has no layers");
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& L = layers[l];
        if (L.biases.size() != L.out_dim()) throw InvalidArgument("bias length does not match layer output");
        if (l > 0 && L.in_dim() != layers[l - 1].out_dim())
            throw InvalidArgument("layer " + std::to_string(l) + " input does not match the previous output");
        if (!L.weights.allFinite() || !L.biases.allFinite()) throw InvalidArgument("non-finite network parameters");
    }
    for (const auto* n : {&input_norm, &output_norm}) {
        if (n->empty()) continue;
        if (n->lo.size() != n->hi.size() || !n->lo.allFinite() || !n->hi.allFinite() ||
            !(n->hi.array() > n->lo.array()).all())
            throw InvalidArgument("invalid normalization constants");
    }
}

std::size_t MlpNetwork::parameter_count() const {
    std::size_t n = 0;
    for (const auto& L : layers) n += static_cast<std::size_t>(L.weights.size() + L.biases.size());
    return n;
}

MlpNetwork make_mlp(const std::vector<Index>& dims, const std::vector<Activation>& activations,
                    std::uint64_t seed) {
    if (dims.size() < 2 || activations.size() != dims.size() - 1)
        throw InvalidArgument("need one activation per layer");
    std::mt19937_64 rng(seed);
    MlpNetwork net;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        const double limit = std::sqrt(6.0 / static_cast<double>(dims[l] + dims[l + 1]));
        std::uniform_real_distribution<double> u(-limit, limit);
        DenseLayer layer;
        layer.weights.resize(dims[l + 1], dims[l]);
        for (Index i = 0; i < layer.weights.size(); ++i) layer.weights.data()[i] = u(rng);
        layer.biases = Vector::Zero(dims[l + 1]);
        layer.activation = activations[l];
        net.layers.push_back(std::move(layer));
    }
    return net;
}

MlpNetwork compose(const std::vector<const MlpNetwork*>& parts) {
    MlpNetwork net;
    for (const auto* p : parts) net.layers.insert(net.layers.end(), p->layers.begin(), p->layers.end());
    if (!parts.empty()) {
        net.input_norm = parts.front()->input_norm;
        net.output_norm = parts.back()->output_norm;
    }
    net.validate();
    return net;
}

Gradients Gradients::zeros_like(const MlpNetwork& net) {
    Gradients g;
    for (const auto& L : net.layers) {
        g.weights.push_back(Matrix::Zero(L.weights.rows(), L.weights.cols()));
        g.biases.push_back(Vector::Zero(L.biases.size()));
    }
    return g;
}

double Gradients::squared_norm() const {
    double s = 0.0;
    for (const auto& w : weights) s += w.squaredNorm();
    for (const auto& b : biases) s += b.squaredNorm();
    return s;
}

ForwardCache forward_pass(const MlpNetwork& net, const Matrix& x) {
    if (net.layers.empty()) throw InvalidArgument("network has no layers");
    if (x.rows() != net.input_dim())
        throw InvalidArgument("input has " + std::to_string(x.rows()) + " rows, network expects " +
                              std::to_string(net.input_dim()));
    ForwardCache cache;
    cache.activations.reserve(net.layers.size() + 1);
    cache.pre.reserve(net.layers.size());
    cache.activations.push_back(x);
    for (const auto& L : net.layers) {
        Matrix z = L.weights * cache.activations.back();
        z.colwise() += L.biases;
        cache.activations.push_back(activate(z, L.activation));
        cache.pre.push_back(std::move(z));
    }
    return cache;
}

Vector evaluate(const MlpNetwork& net, const Vector& x) { return forward_pass(net, x).output().col(0); }

Gradients backward_pass(const MlpNetwork& net, const ForwardCache& cache, const Matrix& target) {
    const std::size_t n_layers = net.layers.size();
    if (target.rows() != cache.output().rows() || target.cols() != cache.output().cols())
        throw InvalidArgument("target shape does not match the network output");
    Gradients g;
    g.weights.resize(n_layers);
    g.biases.resize(n_layers);
    Matrix delta = (cache.output() - target).cwiseProduct(
        derivative(cache.pre.back(), cache.activations.back(), net.layers.back().activation));
    for (std::size_t l = n_layers; l-- > 0;) {
        g.weights[l] = delta * cache.activations[l].transpose();
        g.biases[l] = delta.rowwise().sum();
        if (l > 0) {
            delta = (net.layers[l].weights.transpose() * delta)
                        .cwiseProduct(derivative(cache.pre[l - 1], cache.activations[l], net.layers[l - 1].activation));
        }
    }
    return g;
}

Gradients backward_pass(const MlpNetwork& net, const Vector& x, const Vector& target) {
    return backward_pass(net, forward_pass(net, x), target);
}

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw InvalidArgument("learning rate must be >= 0");
    if (epochs < 1) throw InvalidArgument("need at least one epoch");
    if (batch_size < 1) throw InvalidArgument("batch size must be positive");
}

namespace {

template <typename Step, typename OnEpoch>
TrainResult run_epochs(Index n_samples, const TrainConfig& cfg, Step&& step, OnEpoch&& on_epoch) {
    cfg.validate();
    if (n_samples == 0) throw InvalidArgument("empty training set");
    std::mt19937_64 rng(cfg.seed);
    std::vector<Index> order(static_cast<std::size_t>(n_samples));
    std::iota(order.begin(), order.end(), Index{0});
    TrainResult result;
    result.loss_history.reserve(static_cast<std::size_t>(cfg.epochs));
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        on_epoch(epoch);
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        for (Index start = 0; start < n_samples; start += cfg.batch_size) {
            const Index stop = std::min<Index>(start + cfg.batch_size, n_samples);
            const std::vector<Index> batch(order.begin() + start, order.begin() + stop);
            total += step(batch);
        }
        const double loss = total / static_cast<double>(n_samples);
        if (!std::isfinite(loss)) throw DivergenceError("training diverged at epoch " + std::to_string(epoch));
        result.loss_history.push_back(loss);
    }
    return result;
}

}  // namespace

TrainResult train_sgd(MlpNetwork& net, const EpochInputs& inputs_of_epoch, const Matrix& targets,
                      const TrainConfig& cfg) {
    net.validate();
    if (targets.rows() != net.output_dim()) throw InvalidArgument("targets do not match the network output");
    const Matrix* inputs = nullptr;
    return run_epochs(
        targets.cols(), cfg,
        [&](const std::vector<Index>& batch) {
            const Matrix x = (*inputs)(Eigen::all, batch);
            const Matrix t = targets(Eigen::all, batch);
            const ForwardCache cache = forward_pass(net, x);
            const double loss = 0.5 * (cache.output() - t).squaredNorm();
            const Gradients g = backward_pass(net, cache, t);
            const double scale = cfg.learning_rate / static_cast<double>(batch.size());
            for (std::size_t l = 0; l < net.layers.size(); ++l) {
                net.layers[l].weights -= scale * g.weights[l];
                net.layers[l].biases -= scale * g.biases[l];
            }
            return loss;
        },
        [&](int epoch) {
            inputs = &inputs_of_epoch(epoch);
            if (inputs->cols() != targets.cols()) throw InvalidArgument("inputs and targets differ in sample count");
            if (inputs->rows() != net.input_dim()) throw InvalidArgument("inputs do not match the network input");
        });
}

TrainResult train_sgd(MlpNetwork& net, const Matrix& inputs, const Matrix& targets, const TrainConfig& cfg) {
    return train_sgd(net, [&](int) -> const Matrix& { return inputs; }, targets, cfg);
}

// ---------------------------------------------------------------------------
// Convolutional denoiser

ImageGeometry ImageGeometry::from_grid(const geometry::VoxelGrid& grid) {
    ImageGeometry img;
    img.rows = grid.rows();
    img.cols = grid.cols();
    for (Index j = 0; j < grid.size(); ++j) {
        const auto [r, c] = grid.cell(j);
        img.pixel_of_voxel.push_back(static_cast<Index>(r) * img.cols + c);
    }
    return img;
}

Vector ImageGeometry::to_image(const Vector& voxels) const {
    if (voxels.size() != static_cast<Index>(pixel_of_voxel.size()))
        throw InvalidArgument("voxel vector does not match the image geometry");
    Vector img = Vector::Zero(pixels());
    for (std::size_t j = 0; j < pixel_of_voxel.size(); ++j) img[pixel_of_voxel[j]] = voxels[static_cast<Index>(j)];
    return img;
}

Vector ImageGeometry::to_voxels(const Vector& image) const {
    Vector v(static_cast<Index>(pixel_of_voxel.size()));
    for (std::size_t j = 0; j < pixel_of_voxel.size(); ++j) v[static_cast<Index>(j)] = image[pixel_of_voxel[j]];
    return v;
}

namespace {

// channels x pixels  ->  (channels * k * k) x pixels
Matrix im2col(const Matrix& a, int rows, int cols, int k) {
    const int half = k / 2;
    const Index channels = a.rows();
    Matrix out = Matrix::Zero(channels * k * k, static_cast<Index>(rows) * cols);
    for (Index c = 0; c < channels; ++c)
        for (int di = 0; di < k; ++di)
            for (int dj = 0; dj < k; ++dj) {
                const Index row = (c * k + di) * k + dj;
                for (int r = 0; r < rows; ++r) {
                    const int rr = r + di - half;
                    if (rr < 0 || rr >= rows) continue;
                    for (int q = 0; q < cols; ++q) {
                        const int qq = q + dj - half;
                        if (qq < 0 || qq >= cols) continue;
                        out(row, static_cast<Index>(r) * cols + q) = a(c, static_cast<Index>(rr) * cols + qq);
                    }
                }
            }
    return out;
}

Matrix col2im(const Matrix& cols_mat, Index channels, int rows, int cols, int k) {
    const int half = k / 2;
    Matrix out = Matrix::Zero(channels, static_cast<Index>(rows) * cols);
    for (Index c = 0; c < channels; ++c)
        for (int di = 0; di < k; ++di)
            for (int dj = 0; dj < k; ++dj) {
                const Index row = (c * k + di) * k + dj;
                for (int r = 0; r < rows; ++r) {
                    const int rr = r + di - half;
                    if (rr < 0 || rr >= rows) continue;
                    for (int q = 0; q < cols; ++q) {
                        const int qq = q + dj - half;
                        if (qq < 0 || qq >= cols) continue;
                        out(c, static_cast<Index>(rr) * cols + qq) += cols_mat(row, static_cast<Index>(r) * cols + q);
                    }
                }
            }
    return out;
}

Eigen::RowVectorXd domain_mask(const ImageGeometry& img) {
    Eigen::RowVectorXd mask = Eigen::RowVectorXd::Zero(img.pixels());
    for (Index p : img.pixel_of_voxel) mask[p] = 1.0;
    return mask;
}

struct ConvCache {
    std::vector<Matrix> cols;         // im2col of each layer input
    std::vector<Matrix> pre;
    std::vector<Matrix> activations;  // activations[0] is the input image
};

ConvCache conv_forward(const ConvNet& net, const Vector& voxels, const Eigen::RowVectorXd& mask) {
    ConvCache cache;
    cache.activations.push_back(net.image.to_image(voxels).transpose());
    for (const auto& L : net.layers) {
        if (cache.activations.back().rows() != L.in_channels) throw InvalidArgument("convolution channel mismatch");
        cache.cols.push_back(im2col(cache.activations.back(), net.image.rows, net.image.cols, L.kernel));
        Matrix z = L.weights * cache.cols.back();
        z.colwise() += L.biases;
        Matrix a = activate(z, L.activation);
        a.array().rowwise() *= mask.array();
        cache.pre.push_back(std::move(z));
        cache.activations.push_back(std::move(a));
    }
    return cache;
}

std::vector<std::pair<Matrix, Vector>> conv_backward(const ConvNet& net, const ConvCache& cache,
                                                     const Vector& target_voxels, const Eigen::RowVectorXd& mask) {
    const std::size_t n = net.layers.size();
    std::vector<std::pair<Matrix, Vector>> grads(n);
    const Matrix target = net.image.to_image(target_voxels).transpose();
    Matrix delta = (cache.activations.back() - target)
                       .cwiseProduct(derivative(cache.pre.back(), cache.activations.back(), net.layers.back().activation));
    delta.array().rowwise() *= mask.array();
    for (std::size_t l = n; l-- > 0;) {
        const auto& L = net.layers[l];
        grads[l].first = delta * cache.cols[l].transpose();
        grads[l].second = delta.rowwise().sum();
        if (l > 0) {
            Matrix da = col2im(L.weights.transpose() * delta, L.in_channels, net.image.rows, net.image.cols, L.kernel);
            delta = da.cwiseProduct(derivative(cache.pre[l - 1], cache.activations[l], net.layers[l - 1].activation));
            delta.array().rowwise() *= mask.array();
        }
    }
    return grads;
}

}  // namespace

Vector ConvNet::evaluate(const Vector& voxels) const {
    const ConvCache cache = conv_forward(*this, voxels, domain_mask(image));
    return image.to_voxels(cache.activations.back().row(0).transpose());
}

ConvNet make_denoiser(const ImageGeometry& image, int channels, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ConvNet net;
    net.image = image;
    const int chans[4] = {1, channels, channels, 1};
    const Activation acts[3] = {Activation::relu, Activation::relu, Activation::identity};
    for (int l = 0; l < 3; ++l) {
        ConvLayer L;
        L.in_channels = chans[l];
        L.out_channels = chans[l + 1];
        L.kernel = 3;
        L.activation = acts[l];
        const double fan_in = L.in_channels * 9.0, fan_out = L.out_channels * 9.0;
        std::uniform_real_distribution<double> u(-std::sqrt(6.0 / (fan_in + fan_out)), std::sqrt(6.0 / (fan_in + fan_out)));
        L.weights.resize(L.out_channels, L.in_channels * 9);
        for (Index i = 0; i < L.weights.size(); ++i) L.weights.data()[i] = u(rng);
        L.biases = Vector::Zero(L.out_channels);
        net.layers.push_back(std::move(L));
    }
    return net;
}

std::vector<std::pair<Matrix, Vector>> conv_gradients(const ConvNet& net, const Vector& x, const Vector& target) {
    const auto mask = domain_mask(net.image);
    return conv_backward(net, conv_forward(net, x, mask), target, mask);
}

TrainResult train_sgd(ConvNet& net, const Matrix& inputs, const Matrix& targets, const TrainConfig& cfg) {
    if (inputs.cols() != targets.cols() || inputs.rows() != targets.rows())
        throw InvalidArgument("inputs and targets differ in shape");
    const auto mask = domain_mask(net.image);
    return run_epochs(inputs.cols(), cfg, [&](const std::vector<Index>& batch) {
        std::vector<std::pair<Matrix, Vector>> sum;
        double loss = 0.0;
        for (Index s : batch) {
            const ConvCache cache = conv_forward(net, inputs.col(s), mask);
            const Vector out = net.image.to_voxels(cache.activations.back().row(0).transpose());
            loss += 0.5 * (out - targets.col(s)).squaredNorm();
            auto g = conv_backward(net, cache, targets.col(s), mask);
            if (sum.empty()) {
                sum = std::move(g);
            } else {
                for (std::size_t l = 0; l < g.size(); ++l) {
                    sum[l].first += g[l].first;
                    sum[l].second += g[l].second;
                }
            }
        }
        const double scale = cfg.learning_rate / static_cast<double>(batch.size());
        for (std::size_t l = 0; l < net.layers.size(); ++l) {
            net.layers[l].weights -= scale * sum[l].first;
            net.layers[l].biases -= scale * sum[l].second;
        }
        return loss;
    }, [](int) {});
}

// ---------------------------------------------------------------------------
// Learned SVD

void LsvdTrainingSet::validate() const {
    if (inputs.cols() == 0 || phantoms.cols() == 0) throw InvalidArgument("empty training set");
    if (clean.rows() != inputs.rows() || clean.cols() != inputs.cols())
        throw InvalidArgument("noisy and clean measurements differ in shape");
    if (static_cast<Index>(phantom_of_input.size()) != inputs.cols())
        throw InvalidArgument("every input needs a phantom index");
    for (Index p : phantom_of_input)
        if (p < 0 || p >= phantoms.cols()) throw InvalidArgument("phantom index out of range");
}

MlpNetwork LsvdModel::composed() const { return compose({&dae_encoder, &bridge, &sae_decoder}); }

void LsvdModel::validate() const {
    for (const auto* n : {&dae_encoder, &dae_decoder, &sae_encoder, &sae_decoder, &bridge}) n->validate();
    if (bridge.input_dim() != dae_encoder.output_dim())
        throw InvalidArgument("bridge input does not match the data latent dimension");
    if (bridge.output_dim() != sae_encoder.output_dim() || sae_decoder.input_dim() != bridge.output_dim())
        throw InvalidArgument("bridge output does not match the signal latent dimension");
    if (data_norm.lo.size() != dae_encoder.input_dim() || signal_norm.lo.size() != sae_decoder.output_dim())
        throw InvalidArgument("normalization does not match the network dimensions");
    if (!(mu_a0 > 0.0)) throw InvalidArgument("model has no background absorption");
}

namespace {

TrainResult train_stage(const std::string& stage, MlpNetwork& net, const EpochInputs& x, const Matrix& t,
                        const TrainConfig& cfg, LsvdTrainReport* report) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
        TrainResult r = train_sgd(net, x, t, cfg);
        const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
        if (report) report->stages.push_back({stage, r.loss_history, dt.count()});
        return r;
    } catch (const DivergenceError& e) {
        throw DivergenceError(stage + ": " + e.what());
    }
}

void fit_denoiser(LsvdModel& model, const Matrix& decoded, const LsvdTrainingSet& data, const geometry::VoxelGrid& grid,
                  const TrainConfig& cfg, int channels, std::uint64_t init_seed, LsvdTrainReport* report) {
    const Matrix truth = model.signal_norm.apply(data.phantoms(Eigen::all, data.phantom_of_input));
    model.denoiser = make_denoiser(ImageGeometry::from_grid(grid), channels, init_seed);
    const auto t0 = std::chrono::steady_clock::now();
    try {
        TrainResult r = train_sgd(model.denoiser, decoded, truth, cfg);
        const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
        if (report) report->stages.push_back({"denoiser", r.loss_history, dt.count()});
    } catch (const DivergenceError& e) {
        throw DivergenceError(std::string("denoiser: ") + e.what());
    }
}

LsvdModel fit_networks(const LsvdTrainingSet& data, const geometry::VoxelGrid& grid, double mu_a0,
                       const LsvdTrainConfig& cfg, LsvdTrainReport* report) {
    if (data.phantoms.rows() != grid.size()) throw InvalidArgument("phantom length does not match the grid");
    const Index m = data.inputs.rows();
    const Index n = data.phantoms.rows();
    const Index latent = cfg.arch.latent_dim;
    const auto& arch = cfg.arch;

    LsvdModel model;
    model.mu_a0 = mu_a0;
    model.grid_radius = grid.radius();
    model.grid_side = grid.side();
    model.data_norm = cfg.data_scaling == DataScaling::global ? Normalization::global(data.clean)
                                                              : Normalization::per_feature(data.clean);
    model.signal_norm = Normalization::global(data.phantoms);

    const Matrix x_noisy = model.data_norm.apply(data.inputs);
    const Matrix x_clean = model.data_norm.apply(data.clean);
    const Matrix s = model.signal_norm.apply(data.phantoms);

    // Data autoencoder: noisy in, clean out.
    MlpNetwork dae = make_mlp({m, latent, m}, {Activation::tanh, Activation::sigmoid}, derive_seed(cfg.init_seed, 1));
    Matrix epoch_buffer;
    const auto fixed = [](const Matrix& m) { return [&m](int) -> const Matrix& { return m; }; };
    EpochInputs dae_inputs = fixed(x_noisy);
    if (data.resample) {
        dae_inputs = [&](int epoch) -> const Matrix& {
            epoch_buffer = model.data_norm.apply(data.resample(0, epoch));
            return epoch_buffer;
        };
    }
    train_stage("data autoencoder", dae, dae_inputs, x_clean, cfg.data_ae, report);
    model.dae_encoder.layers = {dae.layers[0]};
    model.dae_decoder.layers = {dae.layers[1]};

    MlpNetwork sae = make_mlp({n, latent, n}, {Activation::tanh, Activation::sigmoid}, derive_seed(cfg.init_seed, 2));
    train_stage("signal autoencoder", sae, fixed(s), s, cfg.signal_ae, report);
    model.sae_encoder.layers = {sae.layers[0]};
    model.sae_decoder.layers = {sae.layers[1]};

    const Matrix z_y = forward_pass(model.dae_encoder, x_noisy).output();
    const Matrix z_mu_phantom = forward_pass(model.sae_encoder, s).output();
    const Matrix z_mu = z_mu_phantom(Eigen::all, data.phantom_of_input);

    std::vector<Index> dims{latent};
    for (int l = 0; l + 1 < arch.bridge_layers; ++l) dims.push_back(arch.bridge_width);
    dims.push_back(latent);
    model.bridge = make_mlp(dims, std::vector<Activation>(static_cast<std::size_t>(arch.bridge_layers), Activation::tanh),
                            derive_seed(cfg.init_seed, 3));
    EpochInputs bridge_inputs = fixed(z_y);
    if (data.resample) {
        bridge_inputs = [&](int epoch) -> const Matrix& {
            epoch_buffer = forward_pass(model.dae_encoder, model.data_norm.apply(data.resample(2, epoch))).output();
            return epoch_buffer;
        };
    }
    train_stage("bridge", model.bridge, bridge_inputs, z_mu, cfg.bridge, report);
    return model;
}

// Pre-denoiser outputs in the signal units of `model`.
Matrix raw_outputs(const LsvdModel& model, const Matrix& inputs) {
    const Matrix z_y = forward_pass(model.dae_encoder, model.data_norm.apply(inputs)).output();
    return forward_pass(model.sae_decoder, forward_pass(model.bridge, z_y).output()).output();
}

// Out-of-fold pre-denoiser outputs: each column comes from networks that never
// saw its phantom, so the denoiser trains on errors like those seen at test time.
Matrix cross_fitted_outputs(const LsvdModel& full, const LsvdTrainingSet& data, const geometry::VoxelGrid& grid,
                            const LsvdTrainConfig& cfg) {
    const int folds = cfg.denoiser_folds;
    const Index n_phantoms = data.phantoms.cols();
    Matrix out(data.phantoms.rows(), data.inputs.cols());
    LsvdTrainConfig sub_cfg = cfg;
    for (int f = 0; f < folds; ++f) {
        std::vector<Index> kept_phantoms, remap(static_cast<std::size_t>(n_phantoms), -1);
        for (Index p = 0; p < n_phantoms; ++p) {
            if (p % folds == f) continue;
            remap[static_cast<std::size_t>(p)] = static_cast<Index>(kept_phantoms.size());
            kept_phantoms.push_back(p);
        }
        std::vector<Index> kept, held;
        for (std::size_t c = 0; c < data.phantom_of_input.size(); ++c)
            (remap[static_cast<std::size_t>(data.phantom_of_input[c])] < 0 ? held : kept).push_back(static_cast<Index>(c));
        if (held.empty()) continue;

        LsvdTrainingSet sub;
        sub.inputs = data.inputs(Eigen::all, kept);
        sub.clean = data.clean(Eigen::all, kept);
        sub.phantoms = data.phantoms(Eigen::all, kept_phantoms);
        for (Index c : kept) sub.phantom_of_input.push_back(remap[static_cast<std::size_t>(data.phantom_of_input[static_cast<std::size_t>(c)])]);
        if (data.resample)
            sub.resample = [&data, kept](int stage, int epoch) -> Matrix { return data.resample(stage, epoch)(Eigen::all, kept); };
        sub_cfg.init_seed = derive_seed(cfg.init_seed, 100 + static_cast<std::uint64_t>(f));
        try {
            const LsvdModel m = fit_networks(sub, grid, full.mu_a0, sub_cfg, nullptr);
            const Matrix raw = raw_outputs(m, data.inputs(Eigen::all, held));
            out(Eigen::all, held) = full.signal_norm.apply(m.signal_norm.invert(raw));
        } catch (const DivergenceError& e) {
            throw DivergenceError("cross-fit fold " + std::to_string(f) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace

LsvdModel train_lsvd(const LsvdTrainingSet& data, const geometry::VoxelGrid& grid, double mu_a0,
                     const LsvdTrainConfig& cfg, LsvdTrainReport* report) {
    data.validate();
    if (cfg.denoiser_folds == 1 || cfg.denoiser_folds < 0)
        throw InvalidArgument("denoiser_folds must be 0 or at least 2");
    LsvdModel model = fit_networks(data, grid, mu_a0, cfg, report);
    if (cfg.use_denoiser) {
        const Matrix decoded = cfg.denoiser_folds >= 2 ? cross_fitted_outputs(model, data, grid, cfg)
                                                       : raw_outputs(model, data.inputs);
        fit_denoiser(model, decoded, data, grid, cfg.denoiser, cfg.arch.denoiser_channels,
                     derive_seed(cfg.init_seed, 4), report);
    }
    model.validate();
    return model;
}

Vector reconstruct_raw(const LsvdModel& model, const Vector& measurement) {
    if (measurement.size() != model.dae_encoder.input_dim())
        throw InvalidArgument("measurement length does not match the model");
    const Vector x = model.data_norm.apply(measurement);
    const Vector s = evaluate(model.sae_decoder, evaluate(model.bridge, evaluate(model.dae_encoder, x)));
    return model.signal_norm.invert(s);
}

Vector infer(const LsvdModel& model, const Vector& measurement) {
    if (measurement.size() != model.dae_encoder.input_dim())
        throw InvalidArgument("measurement length does not match the model");
    const Vector x = model.data_norm.apply(measurement);
    const Vector s = evaluate(model.sae_decoder, evaluate(model.bridge, evaluate(model.dae_encoder, x)));
    const Vector denoised = model.denoiser.layers.empty() ? s : model.denoiser.evaluate(s);
    const Vector mu = model.signal_norm.invert(denoised);
    return mu.cwiseMax(model.mu_a0).cwiseMin(5.0 * model.mu_a0);
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

constexpr char kMagic[8] = {'D', 'O', 'T', 'L', 'S', 'V', 'D', '1'};
constexpr std::uint32_t kVersion = 1;

struct Writer {
    std::ofstream& os;
    void u32(std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }
    void u8(std::uint8_t v) { os.write(reinterpret_cast<const char*>(&v), 1); }
    void f64(double v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }
    void matrix(const Matrix& m) {
        for (Index i = 0; i < m.rows(); ++i)
            for (Index j = 0; j < m.cols(); ++j) f64(m(i, j));
    }
    void vector(const Vector& v) {
        for (Index i = 0; i < v.size(); ++i) f64(v[i]);
    }
};

struct Reader {
    std::ifstream& is;
    const std::string& path;
    void raw(void* dst, std::size_t n) {
        is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (!is) throw IoError("truncated model file: " + path);
    }
    std::uint32_t u32() { std::uint32_t v; raw(&v, sizeof v); return v; }
    std::uint8_t u8() { std::uint8_t v; raw(&v, 1); return v; }
    double f64() { double v; raw(&v, sizeof v); return v; }
    std::uint32_t dim() {
        const auto v = u32();
        if (v == 0 || v > (1u << 20)) throw IoError("implausible dimension in model file: " + path);
        return v;
    }
    Activation activation() {
        const auto a = u8();
        if (a > 3) throw IoError("unknown activation in model file: " + path);
        return static_cast<Activation>(a);
    }
    Matrix matrix(Index rows, Index cols) {
        Matrix m(rows, cols);
        for (Index i = 0; i < rows; ++i)
            for (Index j = 0; j < cols; ++j) m(i, j) = f64();
        return m;
    }
    Vector vector(Index n) {
        Vector v(n);
        for (Index i = 0; i < n; ++i) v[i] = f64();
        return v;
    }
};

void write_mlp(Writer& w, const MlpNetwork& net) {
    w.u32(static_cast<std::uint32_t>(net.layers.size()));
    for (const auto& L : net.layers) {
        w.u32(static_cast<std::uint32_t>(L.out_dim()));
        w.u32(static_cast<std::uint32_t>(L.in_dim()));
        w.u8(static_cast<std::uint8_t>(L.activation));
        w.matrix(L.weights);
        w.vector(L.biases);
    }
}

MlpNetwork read_mlp(Reader& r) {
    MlpNetwork net;
    const auto n = r.dim();
    for (std::uint32_t l = 0; l < n; ++l) {
        DenseLayer L;
        const Index out = r.dim(), in = r.dim();
        L.activation = r.activation();
        L.weights = r.matrix(out, in);
        L.biases = r.vector(out);
        net.layers.push_back(std::move(L));
    }
    return net;
}

}  // namespace

void save_model(const std::string& path, const LsvdModel& model) {
    model.validate();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write model file: " + path);
    Writer w{os};
    os.write(kMagic, sizeof kMagic);
    w.u32(kVersion);
    for (const auto* net : {&model.dae_encoder, &model.dae_decoder, &model.sae_encoder, &model.sae_decoder, &model.bridge})
        write_mlp(w, *net);
    for (const auto* v : {&model.data_norm.lo, &model.data_norm.hi, &model.signal_norm.lo, &model.signal_norm.hi}) {
        w.u32(static_cast<std::uint32_t>(v->size()));
        w.vector(*v);
    }
    w.u32(static_cast<std::uint32_t>(model.denoiser.layers.size()));
    for (const auto& L : model.denoiser.layers) {
        w.u32(static_cast<std::uint32_t>(L.out_channels));
        w.u32(static_cast<std::uint32_t>(L.in_channels));
        w.u32(static_cast<std::uint32_t>(L.kernel));
        w.u8(static_cast<std::uint8_t>(L.activation));
        w.matrix(L.weights);
        w.vector(L.biases);
    }
    w.f64(model.mu_a0);
    w.f64(model.grid_radius);
    w.f64(model.grid_side);
    if (!os) throw IoError("failed writing model file: " + path);
}

LsvdModel load_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingPrerequisite("model file not found: " + path);
    Reader r{is, path};
    char magic[8];
    r.raw(magic, sizeof magic);
    if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw IoError("not a model file: " + path);
    if (r.u32() != kVersion) throw IoError("unsupported model file version: " + path);
    LsvdModel m;
    m.dae_encoder = read_mlp(r);
    m.dae_decoder = read_mlp(r);
    m.sae_encoder = read_mlp(r);
    m.sae_decoder = read_mlp(r);
    m.bridge = read_mlp(r);
    for (auto* v : {&m.data_norm.lo, &m.data_norm.hi, &m.signal_norm.lo, &m.signal_norm.hi}) *v = r.vector(r.dim());
    const auto n_conv = r.u32();
    if (n_conv > 64) throw IoError("implausible layer count in model file: " + path);
    for (std::uint32_t l = 0; l < n_conv; ++l) {
        ConvLayer L;
        L.out_channels = static_cast<int>(r.dim());
        L.in_channels = static_cast<int>(r.dim());
        L.kernel = static_cast<int>(r.dim());
        L.activation = r.activation();
        L.weights = r.matrix(L.out_channels, static_cast<Index>(L.in_channels) * L.kernel * L.kernel);
        L.biases = r.vector(L.out_channels);
        m.denoiser.layers.push_back(std::move(L));
    }
    m.mu_a0 = r.f64();
    m.grid_radius = r.f64();
    m.grid_side = r.f64();
    if (n_conv > 0) m.denoiser.image = ImageGeometry::from_grid(geometry::VoxelGrid(m.grid_radius, m.grid_side));
    try {
        m.validate();
    } catch (const InvalidArgument& e) {
        throw IoError("corrupt model file " + path + ": " + e.what());
    }
    return m;
}

}  // namespace dot::nn
