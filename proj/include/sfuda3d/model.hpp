#pragma once

// The 3D encoder-decoder-classifier segmentation network. Three encoder
// levels (stride-2 downsampling between them), an ASPP block with dilated
// 3x3x3 branches plus a pooled global-context branch, a trilinear-upsampling
// decoder ending in a 1x1x1 projection to the C-channel latent field, and a
// single 1x1x1-conv softmax classifier on top of that field. The decoder
// output is the alignment latent space; the classifier stays frozen during
// adaptation so aligning decoder outputs is sufficient for transfer.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "common.hpp"
#include "preprocess.hpp"
#include "tensor.hpp"
#include "volume.hpp"

namespace sfuda3d {

template <class R>
struct Conv3dLayerT {
    TensorT<R> w, b;
    int stride = 1, dilation = 1, padding = 0;

    TensorT<R> operator()(const TensorT<R>& x) const {
        return bias_add(conv3d(x, w, stride, dilation, padding), b);
    }
};

struct TrainMeta {
    uint32_t epochs = 0;
    uint64_t seed = 0;
    std::vector<float> loss_curve;
};

template <class R>
class SegModelT {
public:
    static constexpr std::array<int, 3> kWidths{8, 16, 32};
    static constexpr std::array<int, 3> kDilations{1, 2, 4};

    static SegModelT build(int num_classes, uint64_t seed) {
        if (num_classes < 2) throw ParameterError("build_model: need at least 2 classes");
        SegModelT m;
        m.num_classes_ = num_classes;
        Rng rng(derive_seed(seed, "model-init"));
        const int w0 = kWidths[0], w1 = kWidths[1], w2 = kWidths[2];
        m.enc1a_ = make_conv(rng, 1, w0, 3, 1, 1, 1);
        m.enc1b_ = make_conv(rng, w0, w0, 3, 1, 1, 1);
        m.down1_ = make_conv(rng, w0, w1, 3, 2, 1, 1);
        m.enc2_ = make_conv(rng, w1, w1, 3, 1, 1, 1);
        m.down2_ = make_conv(rng, w1, w2, 3, 2, 1, 1);
        m.enc3_ = make_conv(rng, w2, w2, 3, 1, 1, 1);
        m.aspp_[0] = make_conv(rng, w2, w2, 3, 1, kDilations[0], kDilations[0]);
        m.aspp_[1] = make_conv(rng, w2, w2, 3, 1, kDilations[1], kDilations[1]);
        m.aspp_[2] = make_conv(rng, w2, w2, 3, 1, kDilations[2], kDilations[2]);
        m.asppg_ = make_conv(rng, w2, w2, 1, 1, 1, 0);
        m.fuse_ = make_conv(rng, 4 * w2, w2, 1, 1, 1, 0);
        m.dec2_ = make_conv(rng, w2, w1, 3, 1, 1, 1);
        m.dec1_ = make_conv(rng, w1, w0, 3, 1, 1, 1);
        m.lat_ = make_conv(rng, w0, num_classes, 1, 1, 1, 0);
        m.cls_ = make_conv(rng, num_classes, num_classes, 1, 1, 1, 0);
        return m;
    }

    int num_classes() const { return num_classes_; }

    // Decoder-output latent field [1,C,P,P,P] for a cubic patch [1,1,P,P,P].
    TensorT<R> latent(const TensorT<R>& patch) const {
        const auto& s = patch.shape();
        if (s.size() != 5 || s[0] != 1 || s[1] != 1 || s[2] != s[3] || s[2] != s[4])
            throw DimensionError("latent: expects a [1,1,P,P,P] patch");
        if (s[2] % 4 != 0 || s[2] < 4) throw DimensionError("latent: patch size must be a multiple of 4");
        const int bottom = s[2] / 4;
        auto x = relu(enc1a_(patch));
        x = relu(enc1b_(x));
        x = relu(down1_(x));
        x = relu(enc2_(x));
        x = relu(down2_(x));
        x = relu(enc3_(x));
        auto a0 = relu(aspp_[0](x));
        auto a1 = relu(aspp_[1](x));
        auto a2 = relu(aspp_[2](x));
        auto ag = relu(asppg_(global_avg_pool(x)));
        auto agu = trilinear_upsample(ag, bottom);
        auto fused = relu(fuse_(concat_channels<R>({a0, a1, a2, agu})));
        auto d2 = relu(dec2_(trilinear_upsample(fused, 2)));
        auto d1 = relu(dec1_(trilinear_upsample(d2, 2)));
        return lat_(d1);
    }

    // Per-voxel class probabilities from a latent field.
    TensorT<R> classify(const TensorT<R>& latent_field) const {
        return softmax_channel(cls_(latent_field));
    }

    TensorT<R> forward(const TensorT<R>& patch) const { return classify(latent(patch)); }

    // Canonical parameter order; serialization, hashing and the optimizer all
    // follow this enumeration.
    std::vector<TensorT<R>> params() const {
        std::vector<TensorT<R>> out;
        for (const auto* layer : layer_list()) {
            out.push_back(layer->w);
            out.push_back(layer->b);
        }
        return out;
    }

    // Everything except the classifier (phi): the parameter set adaptation updates.
    std::vector<TensorT<R>> params_alpha_beta() const {
        auto out = params();
        out.pop_back();
        out.pop_back();
        return out;
    }

    void set_trainable(bool v) {
        for (auto& p : params()) p.set_requires_grad(v);
    }

    uint64_t param_hash() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& p : params())
            h = fnv1a64(p.data().data(), p.data().size() * sizeof(R), h);
        return h;
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& p : params()) n += p.numel();
        return n;
    }

    std::vector<R> flat_params() const {
        std::vector<R> blob;
        blob.reserve(static_cast<size_t>(param_count()));
        for (const auto& p : params()) blob.insert(blob.end(), p.data().begin(), p.data().end());
        return blob;
    }

    void load_flat_params(const std::vector<R>& blob) {
        if (int64_t(blob.size()) != param_count())
            throw FormatError("parameter blob length does not match architecture");
        size_t off = 0;
        for (auto& p : params()) {
            std::copy_n(blob.begin() + long(off), p.numel(), p.data().begin());
            off += size_t(p.numel());
        }
    }

    SegModelT clone() const {
        SegModelT m = *this;
        for (auto* layer : m.layer_list_mut()) {
            layer->w = TensorT<R>::from(layer->w.shape(), layer->w.data(), layer->w.requires_grad());
            layer->b = TensorT<R>::from(layer->b.shape(), layer->b.data(), layer->b.requires_grad());
        }
        return m;
    }

    TrainMeta meta;

private:
    static Conv3dLayerT<R> make_conv(Rng& rng, int cin, int cout, int k, int stride, int dilation,
                                     int padding) {
        const double he = std::sqrt(2.0 / (double(cin) * k * k * k));
        std::vector<R> w(static_cast<size_t>(cout) * cin * k * k * k);
        for (auto& v : w) v = R(rng.normal() * he);
        Conv3dLayerT<R> layer;
        layer.w = TensorT<R>::from({cout, cin, k, k, k}, std::move(w), true);
        layer.b = TensorT<R>::zeros({cout}, true);
        layer.stride = stride;
        layer.dilation = dilation;
        layer.padding = padding;
        return layer;
    }

    std::vector<const Conv3dLayerT<R>*> layer_list() const {
        return {&enc1a_, &enc1b_, &down1_, &enc2_,  &down2_, &enc3_, &aspp_[0], &aspp_[1],
                &aspp_[2], &asppg_, &fuse_, &dec2_, &dec1_,  &lat_,  &cls_};
    }
    std::vector<Conv3dLayerT<R>*> layer_list_mut() {
        return {&enc1a_, &enc1b_, &down1_, &enc2_,  &down2_, &enc3_, &aspp_[0], &aspp_[1],
                &aspp_[2], &asppg_, &fuse_, &dec2_, &dec1_,  &lat_,  &cls_};
    }

    int num_classes_ = 0;
    Conv3dLayerT<R> enc1a_, enc1b_, down1_, enc2_, down2_, enc3_;
    std::array<Conv3dLayerT<R>, 3> aspp_;
    Conv3dLayerT<R> asppg_, fuse_, dec2_, dec1_, lat_, cls_;
};

using SegModel = SegModelT<float>;

// Closed-form parameter count for the fixed architecture.
inline int64_t expected_param_count(int num_classes) {
    const int w0 = SegModel::kWidths[0], w1 = SegModel::kWidths[1], w2 = SegModel::kWidths[2];
    auto conv = [](int cin, int cout, int k) { return int64_t(cout) * cin * k * k * k + cout; };
    int64_t n = 0;
    n += conv(1, w0, 3) + conv(w0, w0, 3);            // level 1
    n += conv(w0, w1, 3) + conv(w1, w1, 3);           // level 2
    n += conv(w1, w2, 3) + conv(w2, w2, 3);           // level 3
    n += 3 * conv(w2, w2, 3) + conv(w2, w2, 1);       // ASPP branches + pooled branch
    n += conv(4 * w2, w2, 1);                         // fusion
    n += conv(w2, w1, 3) + conv(w1, w0, 3);           // decoder
    n += conv(w0, num_classes, 1);                    // latent projection
    n += conv(num_classes, num_classes, 1);           // classifier
    return n;
}

// ---------------------------------------------------------------------------
// Checkpoint: "SF3D" | version u8 | C u32 | widths 3*u32 | dilations 3*u32 |
// epochs u32 | seed u64 | curve_len u32 | curve f32[] | param_count u64 |
// blob f32[] | fnv1a64(blob) u64.

inline void save_checkpoint(const std::string& path, const SegModel& model) {
    auto f = open_output(path);
    f.write("SF3D", 4);
    detail_io::write_le<uint8_t>(f, 1);
    detail_io::write_le<uint32_t>(f, uint32_t(model.num_classes()));
    for (int w : SegModel::kWidths) detail_io::write_le<uint32_t>(f, uint32_t(w));
    for (int d : SegModel::kDilations) detail_io::write_le<uint32_t>(f, uint32_t(d));
    detail_io::write_le<uint32_t>(f, model.meta.epochs);
    detail_io::write_le<uint64_t>(f, model.meta.seed);
    detail_io::write_le<uint32_t>(f, uint32_t(model.meta.loss_curve.size()));
    for (float v : model.meta.loss_curve) detail_io::write_le<float>(f, v);
    const auto blob = model.flat_params();
    detail_io::write_le<uint64_t>(f, uint64_t(blob.size()));
    f.write(reinterpret_cast<const char*>(blob.data()), std::streamsize(blob.size() * sizeof(float)));
    detail_io::write_le<uint64_t>(f, fnv1a64(blob.data(), blob.size() * sizeof(float)));
    if (!f) throw DataError("write failed: " + path);
}

inline SegModel load_checkpoint(const std::string& path) {
    auto f = open_input(path);
    detail_io::read_magic(f, "SF3D");
    if (detail_io::read_le<uint8_t>(f) != 1) throw FormatError("unsupported checkpoint version");
    const auto C = detail_io::read_le<uint32_t>(f);
    for (int w : SegModel::kWidths)
        if (detail_io::read_le<uint32_t>(f) != uint32_t(w))
            throw FormatError("checkpoint width descriptor mismatch");
    for (int d : SegModel::kDilations)
        if (detail_io::read_le<uint32_t>(f) != uint32_t(d))
            throw FormatError("checkpoint dilation descriptor mismatch");
    TrainMeta meta;
    meta.epochs = detail_io::read_le<uint32_t>(f);
    meta.seed = detail_io::read_le<uint64_t>(f);
    const auto curve_len = detail_io::read_le<uint32_t>(f);
    meta.loss_curve.resize(curve_len);
    for (auto& v : meta.loss_curve) v = detail_io::read_le<float>(f);
    const auto count = detail_io::read_le<uint64_t>(f);
    if (count != uint64_t(expected_param_count(int(C))))
        throw FormatError("checkpoint parameter count does not match architecture");
    std::vector<float> blob(count);
    f.read(reinterpret_cast<char*>(blob.data()), std::streamsize(count * sizeof(float)));
    if (static_cast<size_t>(f.gcount()) != count * sizeof(float)) throw FormatError("truncated checkpoint blob");
    const auto expect = detail_io::read_le<uint64_t>(f);
    if (fnv1a64(blob.data(), blob.size() * sizeof(float)) != expect)
        throw ChecksumError("checkpoint checksum mismatch");
    SegModel m = SegModel::build(int(C), 0);
    m.load_flat_params(blob);
    m.meta = meta;
    return m;
}

// ---------------------------------------------------------------------------
// Patch extraction into tensors; tensor spatial order is (z,y,x) = (k,j,i).

inline Tensor patch_to_tensor(const Volume& vol, const Crop& c) {
    const int P = int(c.size);
    std::vector<float> data(static_cast<size_t>(P) * P * P);
    size_t t = 0;
    for (int z = 0; z < P; ++z)
        for (int y = 0; y < P; ++y)
            for (int x = 0; x < P; ++x)
                data[t++] = vol.at(c.i + uint32_t(x), c.j + uint32_t(y), c.k + uint32_t(z));
    return Tensor::from({1, 1, P, P, P}, std::move(data));
}

inline std::vector<uint8_t> patch_labels(const LabelMap& labels, const Crop& c) {
    const int P = int(c.size);
    std::vector<uint8_t> out(static_cast<size_t>(P) * P * P);
    size_t t = 0;
    for (int z = 0; z < P; ++z)
        for (int y = 0; y < P; ++y)
            for (int x = 0; x < P; ++x)
                out[t++] = labels.at(c.i + uint32_t(x), c.j + uint32_t(y), c.k + uint32_t(z));
    return out;
}

// ---------------------------------------------------------------------------
// Sliding-window prediction: probabilities of all overlapping windows are
// averaged per voxel, then argmax (ties to the lowest class). Windows are
// computed in fixed-size batches (parallel within a batch) and accumulated in
// window order, so results do not depend on the thread count.

inline LabelMap sliding_window_predict(const SegModel& model, const Volume& vol, uint32_t patch,
                                       std::array<uint32_t, 3> stride) {
    const auto crops = crop_grid(vol.dims, patch, stride);
    const int C = model.num_classes();
    const int64_t voxels = vol.numel();
    std::vector<float> prob_sum(static_cast<size_t>(voxels) * size_t(C), 0.f);

    constexpr size_t kBatch = 16;
    const int64_t pvox = int64_t(patch) * patch * patch;
    std::vector<std::vector<float>> batch_probs(kBatch);
    for (size_t b0 = 0; b0 < crops.size(); b0 += kBatch) {
        const size_t bn = std::min(kBatch, crops.size() - b0);
        parallel_for(int64_t(bn), 1, [&](int64_t bi) {
            const Crop& c = crops[b0 + size_t(bi)];
            auto probs = model.classify(model.latent(patch_to_tensor(vol, c)));
            batch_probs[size_t(bi)] = probs.data();
        });
        for (size_t bi = 0; bi < bn; ++bi) {
            const Crop& c = crops[b0 + bi];
            const float* p = batch_probs[bi].data();
            for (int cls = 0; cls < C; ++cls)
                for (uint32_t z = 0; z < patch; ++z)
                    for (uint32_t y = 0; y < patch; ++y) {
                        const float* src = p + ((int64_t(cls) * patch + z) * patch + y) * patch;
                        float* dst = prob_sum.data() +
                                     size_t(cls) * size_t(voxels) +
                                     (static_cast<size_t>(c.k + z) * vol.dims[1] + (c.j + y)) * vol.dims[0] + c.i;
                        for (uint32_t x = 0; x < patch; ++x) dst[x] += src[x];
                    }
        }
    }

    LabelMap out;
    out.dims = vol.dims;
    out.spacing = vol.spacing;
    out.values.resize(static_cast<size_t>(voxels));
    for (int64_t v = 0; v < voxels; ++v) {
        int best = 0;
        float bv = prob_sum[size_t(v)];
        for (int cls = 1; cls < C; ++cls) {
            const float x = prob_sum[size_t(cls) * size_t(voxels) + size_t(v)];
            if (x > bv) {
                bv = x;
                best = cls;
            }
        }
        out.values[size_t(v)] = uint8_t(best);
    }
    return out;
}

}  // namespace sfuda3d
