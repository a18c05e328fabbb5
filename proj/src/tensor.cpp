#include "bevdiff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace bevdiff {

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t acc, int d) { return acc * static_cast<std::size_t>(d); });
}

static void validate_extents(const Shape& shape) {
    if (shape.empty() || shape.size() > 4)
        throw ShapeError("tensor rank must be 1..4, got shape " + to_string(shape));
    for (int d : shape)
        if (d < 1) throw ShapeError("tensor extents must be >= 1, got shape " + to_string(shape));
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
    validate_extents(shape_);
    data_.assign(numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
    validate_extents(shape_);
    if (numel(shape_) != data_.size())
        throw ShapeError("shape " + to_string(shape_) + " does not match " + std::to_string(data_.size()) +
                         " values");
}

double Tensor::item() const {
    if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor of shape " + to_string(shape_));
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (numel(shape) != data_.size())
        throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         to_string(t.shape()));
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require_rank(a, 4, "concat_channels");
    require_rank(b, 4, "concat_channels");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw ShapeError("concat_channels: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    const std::size_t plane = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
    Tensor out(Shape{n, ca + cb, a.dim(2), a.dim(3)});
    auto dst = out.data().begin();
    for (int i = 0; i < n; ++i) {
        auto sa = a.data().subspan(i * ca * plane, ca * plane);
        auto sb = b.data().subspan(i * cb * plane, cb * plane);
        dst = std::copy(sa.begin(), sa.end(), dst);
        dst = std::copy(sb.begin(), sb.end(), dst);
    }
    return out;
}

Tensor slice_channels(const Tensor& t, int begin, int end) {
    require_rank(t, 4, "slice_channels");
    if (begin < 0 || end > t.dim(1) || begin >= end)
        throw ShapeError("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for shape " + to_string(t.shape()));
    const std::size_t plane = static_cast<std::size_t>(t.dim(2)) * t.dim(3);
    Tensor out(Shape{t.dim(0), end - begin, t.dim(2), t.dim(3)});
    auto dst = out.data().begin();
    for (int n = 0; n < t.dim(0); ++n) {
        auto src = t.data().subspan((static_cast<std::size_t>(n) * t.dim(1) + begin) * plane, (end - begin) * plane);
        dst = std::copy(src.begin(), src.end(), dst);
    }
    return out;
}

Tensor stack(std::span<const Tensor> items) {
    if (items.empty()) throw ShapeError("stack: no tensors");
    const Shape& s = items.front().shape();
    if (s.size() != 3) throw ShapeError("stack: expected rank-3 items, got " + to_string(s));
    std::vector<double> values;
    values.reserve(items.size() * items.front().size());
    for (const auto& t : items) {
        if (t.shape() != s) throw ShapeError("stack: shape mismatch " + to_string(s) + " vs " + to_string(t.shape()));
        values.insert(values.end(), t.values().begin(), t.values().end());
    }
    return Tensor(Shape{static_cast<int>(items.size()), s[0], s[1], s[2]}, std::move(values));
}

Tensor batch_item(const Tensor& batch, int n) {
    require_rank(batch, 4, "batch_item");
    const std::size_t per = batch.size() / batch.dim(0);
    auto src = batch.data().subspan(per * n, per);
    return Tensor(Shape{1, batch.dim(1), batch.dim(2), batch.dim(3)}, std::vector<double>(src.begin(), src.end()));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace bevdiff
