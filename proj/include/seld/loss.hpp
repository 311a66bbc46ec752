// Multi-ACCDOA training objective: class-wise auxiliary-duplicated
// permutation-invariant MSE. For every (batch, frame, class) cell the target
// is a set of up to three unit DoA vectors; the loss is the minimum over the
// valid 3-track assignment patterns of the per-cell MSE, averaged over all
// cells.
//
// Pattern enumeration (fixed order; ties resolved by lowest index):
//   0 or 1 event e          -> (e,e,e)                        1 pattern
//   2 events {a,b}          -> (a,a,b),(a,b,a),(b,a,a),
//                              (a,b,b),(b,a,b),(b,b,a)        6 patterns
//   3 events {a,b,c}        -> all permutations, lexicographic 6 patterns
#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "seld/tensor.hpp"

namespace seld {

struct CapacityError : std::runtime_error {
    explicit CapacityError(const std::string& msg) : std::runtime_error(msg) {}
};

using Vec3 = std::array<double, 3>;

// Per (batch, frame, class) target cell: the set of active DoA vectors.
struct TargetCell {
    std::uint8_t count = 0;
    std::array<Vec3, 3> vecs{{{0, 0, 0}, {0, 0, 0}, {0, 0, 0}}};
};

struct ClassFrameTargets {
    std::int64_t batch = 0, frames = 0, classes = 0;
    std::vector<TargetCell> cells;  // (batch * frames * classes), row-major

    TargetCell& at(std::int64_t b, std::int64_t t, std::int64_t k) {
        return cells[static_cast<std::size_t>((b * frames + t) * classes + k)];
    }
    const TargetCell& at(std::int64_t b, std::int64_t t, std::int64_t k) const {
        return cells[static_cast<std::size_t>((b * frames + t) * classes + k)];
    }

    void add_event(std::int64_t b, std::int64_t t, std::int64_t k, const Vec3& v) {
        TargetCell& cell = at(b, t, k);
        if (cell.count >= 3)
            throw CapacityError("more than 3 simultaneous events for class " + std::to_string(k) +
                                " at frame " + std::to_string(t));
        cell.vecs[cell.count++] = v;
    }
};

inline ClassFrameTargets make_target_sets(std::int64_t batch, std::int64_t frames,
                                          std::int64_t classes) {
    ClassFrameTargets t;
    t.batch = batch;
    t.frames = frames;
    t.classes = classes;
    t.cells.assign(static_cast<std::size_t>(batch * frames * classes), TargetCell{});
    return t;
}

// Recover target sets from a dense multi-ACCDOA tensor (B, T, 3, 3, K).
// Encoding stores n distinct vectors on the first tracks with the remainder
// duplicated, so the set is the sequence of bitwise-distinct non-zero track
// vectors in track order.
template <typename T>
ClassFrameTargets target_sets_from_dense(const TensorT<T>& target) {
    if (target.ndim() != 5 || target.dim(2) != 3 || target.dim(3) != 3)
        throw ShapeError("target_sets_from_dense: expected (B,T,3,3,K), got " +
                         shape_str(target.shape()));
    const std::int64_t b = target.dim(0), tf = target.dim(1), k = target.dim(4);
    ClassFrameTargets sets = make_target_sets(b, tf, k);
    const T* p = target.data();
    const std::int64_t cell_stride = 3 * 3 * k;
    for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t ti = 0; ti < tf; ++ti) {
            const T* base = p + (bi * tf + ti) * cell_stride;
            for (std::int64_t ki = 0; ki < k; ++ki) {
                TargetCell& cell = sets.at(bi, ti, ki);
                for (int track = 0; track < 3; ++track) {
                    Vec3 v{static_cast<double>(base[(track * 3 + 0) * k + ki]),
                           static_cast<double>(base[(track * 3 + 1) * k + ki]),
                           static_cast<double>(base[(track * 3 + 2) * k + ki])};
                    if (v[0] == 0.0 && v[1] == 0.0 && v[2] == 0.0) continue;
                    bool duplicate = false;
                    for (int e = 0; e < cell.count; ++e)
                        duplicate = duplicate || (cell.vecs[e][0] == v[0] && cell.vecs[e][1] == v[1] &&
                                                  cell.vecs[e][2] == v[2]);
                    if (!duplicate) cell.vecs[cell.count++] = v;
                }
            }
        }
    return sets;
}

namespace detail {

// Track-to-event index patterns per event count.
inline const std::vector<std::array<int, 3>>& adpit_patterns(int count) {
    static const std::vector<std::array<int, 3>> one = {{0, 0, 0}};
    static const std::vector<std::array<int, 3>> two = {{0, 0, 1}, {0, 1, 0}, {1, 0, 0},
                                                        {0, 1, 1}, {1, 0, 1}, {1, 1, 0}};
    static const std::vector<std::array<int, 3>> three = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2},
                                                          {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
    if (count <= 1) return one;
    if (count == 2) return two;
    return three;
}

}  // namespace detail

// pred: (B, T, 3 tracks, 3 axes, K). Returns a scalar loss tensor wired into
// the autodiff graph of pred; the gradient is the subgradient of the selected
// minimum-cost pattern in each cell.
template <typename T>
TensorT<T> adpit_loss(const TensorT<T>& pred, const ClassFrameTargets& targets) {
    if (pred.ndim() != 5 || pred.dim(2) != 3 || pred.dim(3) != 3)
        throw ShapeError("adpit_loss: expected (B,T,3,3,K), got " + shape_str(pred.shape()));
    const std::int64_t b = pred.dim(0), tf = pred.dim(1), k = pred.dim(4);
    if (b != targets.batch || tf != targets.frames || k != targets.classes)
        throw ShapeError("adpit_loss: prediction " + shape_str(pred.shape()) +
                         " inconsistent with target sets (" + std::to_string(targets.batch) + "," +
                         std::to_string(targets.frames) + "," + std::to_string(targets.classes) + ")");
    const std::int64_t cells = b * tf * k;
    const std::int64_t cell_stride = 3 * 3 * k;
    // Chosen per-cell target values, laid out like pred, kept for backward.
    auto chosen = std::make_shared<std::vector<T>>(pred.vec().size(), T(0));
    const T* p = pred.data();
    double total = 0.0;
    for (std::int64_t bi = 0; bi < b; ++bi) {
        for (std::int64_t ti = 0; ti < tf; ++ti) {
            const T* base = p + (bi * tf + ti) * cell_stride;
            T* cbase = chosen->data() + (bi * tf + ti) * cell_stride;
            for (std::int64_t ki = 0; ki < k; ++ki) {
                const TargetCell& cell = targets.at(bi, ti, ki);
                const auto& patterns = detail::adpit_patterns(cell.count);
                double best = 0.0;
                int best_idx = -1;
                for (std::size_t pi = 0; pi < patterns.size(); ++pi) {
                    double s = 0.0;
                    for (int track = 0; track < 3; ++track) {
                        const Vec3& tv = cell.count == 0 ? Vec3{0, 0, 0}
                                                         : cell.vecs[static_cast<std::size_t>(
                                                               patterns[pi][track])];
                        for (int axis = 0; axis < 3; ++axis) {
                            const double d =
                                static_cast<double>(base[(track * 3 + axis) * k + ki]) - tv[axis];
                            s += d * d;
                        }
                    }
                    s /= 9.0;
                    if (best_idx < 0 || s < best) {
                        best = s;
                        best_idx = static_cast<int>(pi);
                    }
                }
                total += best;
                const auto& pat = patterns[static_cast<std::size_t>(best_idx)];
                for (int track = 0; track < 3; ++track) {
                    const Vec3& tv =
                        cell.count == 0 ? Vec3{0, 0, 0} : cell.vecs[static_cast<std::size_t>(pat[track])];
                    for (int axis = 0; axis < 3; ++axis)
                        cbase[(track * 3 + axis) * k + ki] = static_cast<T>(tv[axis]);
                }
            }
        }
    }
    const T loss = static_cast<T>(total / static_cast<double>(cells));
    const T norm = static_cast<T>(2.0 / (9.0 * static_cast<double>(cells)));
    return detail::make_op<T>(
        {1}, {loss}, {pred}, [chosen, norm](detail::Node<T>& self) {
            if (!self.parents[0]->requires_grad) return;
            auto& acc = self.parents[0]->ensure_grad();
            const auto& pd = self.parents[0]->data;
            const T g = self.grad[0] * norm;
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g * (pd[i] - (*chosen)[i]);
        });
}

}  // namespace seld
