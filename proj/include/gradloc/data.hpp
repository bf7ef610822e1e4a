#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gradloc/nn.hpp"
#include "gradloc/tensor.hpp"

namespace gradloc {

// Images are stored channel-planar (R plane, G plane, B plane), row-major,
// scaled to [0,1]. Labels are class indices.
struct Dataset {
    int num_classes = 0;
    int side = 0;
    std::string split;  // "train" or "test"
    std::vector<std::vector<float>> images;  // each 3*side*side
    std::vector<int> labels;

    std::size_t size() const { return images.size(); }
    void validate() const;
};

// Standard CIFAR-10 binary batches: records of 3073 bytes, one label byte
// followed by 3x1024 channel-planar pixel bytes. Expects data_batch_1..5.bin
// and test_batch.bin under dir.
std::pair<Dataset, Dataset> load_cifar10(const std::string& dir);

// Deterministic classification set: per-class Gaussian templates (amplitude
// 0.5 around mid-gray, clipped to [0,1]) plus per-sample noise of std 0.1,
// balanced labels in round-robin order. The template stream depends only on
// (seed, classes, side), so train and test splits share their classes.
Dataset synthetic_dataset(int n, int classes, int side, std::uint64_t seed);
std::pair<Dataset, Dataset> synthetic_splits(int n_train, int n_test, int classes, int side,
                                             std::uint64_t seed);

// Bilinear resize of a [B,3,H,W] batch; exact identity when the sides match.
Tensor resize_batch(const Tensor& images, int target_side);
// Per-channel standardization (x - mean) / std.
Tensor normalize_batch(const Tensor& images, const std::array<double, 3>& mean,
                       const std::array<double, 3>& stdev);
// Resize followed by standardization.
Tensor resize_normalize(const Tensor& images, int target_side, const std::array<double, 3>& mean,
                        const std::array<double, 3>& stdev);

struct Batch {
    Tensor images;  // [B,3,side,side] in [0,1]
    std::vector<int> labels;
};

// Seeded batching; emits the final partial batch. shuffle=false preserves
// dataset order.
class BatchStream {
  public:
    BatchStream(const Dataset& ds, int batch, std::uint64_t seed, bool shuffle);
    std::optional<Batch> next();
    void restart(std::uint64_t seed, bool shuffle);  // new epoch
    std::size_t batches_per_epoch() const;

  private:
    const Dataset* ds_;
    int batch_;
    std::vector<int> order_;
    std::size_t pos_ = 0;
};

Batch gather_batch(const Dataset& ds, const std::vector<int>& indices);

}  // namespace gradloc
