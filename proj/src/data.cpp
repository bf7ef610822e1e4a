#include "gradloc/data.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace gradloc {

namespace {
constexpr std::size_t kCifarRecord = 3073;  // 1 label byte + 3*32*32 pixels
}

void Dataset::validate() const {
    if (images.empty()) throw DataError("dataset is empty");
    if (images.size() != labels.size()) throw DataError("dataset: image/label count mismatch");
    const std::size_t expect = 3UL * static_cast<std::size_t>(side) * static_cast<std::size_t>(side);
    for (const auto& img : images)
        if (img.size() != expect) throw DataError("dataset: inhomogeneous image shapes");
    for (int y : labels)
        if (y < 0 || y >= num_classes) throw DataError("dataset: label outside [0, classes)");
}

namespace {

void read_cifar_file(const std::string& path, Dataset& out) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cifar10: cannot open " + path);
    f.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(f.tellg());
    f.seekg(0);
    if (size % kCifarRecord != 0)
        throw FormatError("cifar10: " + path + " size " + std::to_string(size) +
                          " is not a multiple of 3073");
    const std::size_t records = size / kCifarRecord;
    std::vector<unsigned char> buf(kCifarRecord);
    for (std::size_t r = 0; r < records; ++r) {
        f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(kCifarRecord));
        if (!f) throw FormatError("cifar10: short read in " + path);
        const int label = buf[0];
        if (label > 9) throw DataError("cifar10: label byte " + std::to_string(label) + " > 9 in " + path);
        std::vector<float> img(3 * 32 * 32);
        for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(buf[i + 1]) / 255.0f;
        out.images.push_back(std::move(img));
        out.labels.push_back(label);
    }
}

}  // namespace

std::pair<Dataset, Dataset> load_cifar10(const std::string& dir) {
    Dataset train, test;
    train.num_classes = test.num_classes = 10;
    train.side = test.side = 32;
    train.split = "train";
    test.split = "test";
    for (int i = 1; i <= 5; ++i)
        read_cifar_file((std::filesystem::path(dir) / ("data_batch_" + std::to_string(i) + ".bin")).string(),
                        train);
    read_cifar_file((std::filesystem::path(dir) / "test_batch.bin").string(), test);
    train.validate();
    test.validate();
    return {std::move(train), std::move(test)};
}

namespace {

Dataset synthetic_split(int n, int classes, int side, std::uint64_t seed, const char* split,
                        std::uint64_t noise_tag) {
    if (classes < 1 || n < classes) throw ParameterError("synthetic_dataset requires n >= classes");
    if (side < 1) throw ParameterError("synthetic_dataset: side must be positive");
    const std::size_t pixels = 3UL * static_cast<std::size_t>(side) * static_cast<std::size_t>(side);

    Rng base(seed);
    Rng trng = base.child(1);  // template stream, shared across splits
    std::vector<std::vector<float>> templates(static_cast<std::size_t>(classes));
    for (auto& t : templates) {
        t.resize(pixels);
        for (auto& v : t)
            v = std::clamp(0.5f + 0.5f * static_cast<float>(trng.normal()), 0.0f, 1.0f);
    }

    Rng nrng = base.child(noise_tag);
    Dataset ds;
    ds.num_classes = classes;
    ds.side = side;
    ds.split = split;
    ds.images.reserve(static_cast<std::size_t>(n));
    ds.labels.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int label = i % classes;
        std::vector<float> img(pixels);
        const auto& t = templates[static_cast<std::size_t>(label)];
        for (std::size_t p = 0; p < pixels; ++p)
            img[p] = std::clamp(t[p] + 0.1f * static_cast<float>(nrng.normal()), 0.0f, 1.0f);
        ds.images.push_back(std::move(img));
        ds.labels.push_back(label);
    }
    ds.validate();
    return ds;
}

}  // namespace

Dataset synthetic_dataset(int n, int classes, int side, std::uint64_t seed) {
    return synthetic_split(n, classes, side, seed, "train", 2);
}

std::pair<Dataset, Dataset> synthetic_splits(int n_train, int n_test, int classes, int side,
                                             std::uint64_t seed) {
    return {synthetic_split(n_train, classes, side, seed, "train", 2),
            synthetic_split(n_test, classes, side, seed, "test", 3)};
}

Tensor resize_batch(const Tensor& images, int target_side) {
    if (target_side < 1) throw ParameterError("resize_batch: target side must be >= 1");
    if (images.ndim() != 4) throw DimensionError("resize_batch expects [B,3,H,W]");
    if (images.dim(2) == target_side && images.dim(3) == target_side) return images;
    return bilinear_resize(images, target_side, target_side);
}

Tensor normalize_batch(const Tensor& images, const std::array<double, 3>& mean,
                       const std::array<double, 3>& stdev) {
    if (images.ndim() != 4 || images.dim(1) != 3) throw DimensionError("normalize_batch expects [B,3,H,W]");
    Tensor m = Tensor::zeros({3, 1, 1}, images.dtype());
    Tensor inv = Tensor::zeros({3, 1, 1}, images.dtype());
    detail::dispatch(images.dtype(), [&](auto tag) {
        using T = decltype(tag);
        for (int c = 0; c < 3; ++c) {
            if (stdev[static_cast<std::size_t>(c)] == 0) throw ParameterError("normalize_batch: zero std");
            m.data<T>()[static_cast<std::size_t>(c)] = static_cast<T>(mean[static_cast<std::size_t>(c)]);
            inv.data<T>()[static_cast<std::size_t>(c)] =
                static_cast<T>(1.0 / stdev[static_cast<std::size_t>(c)]);
        }
    });
    return mul(sub(images, m), inv);
}

Tensor resize_normalize(const Tensor& images, int target_side, const std::array<double, 3>& mean,
                        const std::array<double, 3>& stdev) {
    return normalize_batch(resize_batch(images, target_side), mean, stdev);
}

Batch gather_batch(const Dataset& ds, const std::vector<int>& indices) {
    const std::int64_t b = static_cast<std::int64_t>(indices.size());
    const std::int64_t pixels = 3LL * ds.side * ds.side;
    Tensor images = Tensor::zeros({b, 3, ds.side, ds.side}, DType::F32);
    auto iv = images.data<float>();
    Batch batch;
    batch.labels.reserve(indices.size());
    for (std::int64_t i = 0; i < b; ++i) {
        const auto& src = ds.images[static_cast<std::size_t>(indices[static_cast<std::size_t>(i)])];
        std::memcpy(iv.data() + i * pixels, src.data(), static_cast<std::size_t>(pixels) * sizeof(float));
        batch.labels.push_back(ds.labels[static_cast<std::size_t>(indices[static_cast<std::size_t>(i)])]);
    }
    batch.images = std::move(images);
    return batch;
}

BatchStream::BatchStream(const Dataset& ds, int batch, std::uint64_t seed, bool shuffle)
    : ds_(&ds), batch_(batch) {
    if (batch < 1) throw ParameterError("batch size must be >= 1");
    restart(seed, shuffle);
}

void BatchStream::restart(std::uint64_t seed, bool shuffle) {
    order_.resize(ds_->size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
    if (shuffle) {
        Rng rng(seed);
        for (std::size_t i = order_.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i)));
            std::swap(order_[i - 1], order_[j]);
        }
    }
    pos_ = 0;
}

std::size_t BatchStream::batches_per_epoch() const {
    return (ds_->size() + static_cast<std::size_t>(batch_) - 1) / static_cast<std::size_t>(batch_);
}

std::optional<Batch> BatchStream::next() {
    if (pos_ >= order_.size()) return std::nullopt;
    const std::size_t end = std::min(order_.size(), pos_ + static_cast<std::size_t>(batch_));
    std::vector<int> idx(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                         order_.begin() + static_cast<std::ptrdiff_t>(end));
    pos_ = end;
    return gather_batch(*ds_, idx);
}

}  // namespace gradloc
