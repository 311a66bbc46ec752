#include "seld/selftest.hpp"

#include <cmath>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "seld/loss.hpp"
#include "seld/metrics.hpp"
#include "seld/model.hpp"
#include "seld/nn.hpp"
#include "seld/train.hpp"

namespace seld {

namespace {

struct Check {
    std::string name;
    std::string tolerance;
    std::function<bool()> run;
};

// central finite differences against one backward pass; relative error with a
// unit floor so near-zero gradients are measured absolutely
double fd_max_rel_error(const std::function<TensorD()>& make_loss, std::vector<TensorD> leaves,
                        double h = 1e-5) {
    for (auto& leaf : leaves) leaf.zero_grad();
    TensorD loss = make_loss();
    loss.backward();
    std::vector<std::vector<double>> analytic;
    for (auto& leaf : leaves)
        analytic.push_back(leaf.has_grad() ? leaf.grad() : std::vector<double>(leaf.numel(), 0.0));
    double worst = 0.0;
    NoGradGuard ng;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto& leaf = leaves[li];
        for (std::int64_t i = 0; i < leaf.numel(); ++i) {
            const double orig = leaf.data()[i];
            leaf.data()[i] = orig + h;
            const double fp = make_loss().item();
            leaf.data()[i] = orig - h;
            const double fm = make_loss().item();
            leaf.data()[i] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double a = analytic[li][static_cast<std::size_t>(i)];
            const double rel = std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // anonymous namespace

int run_selftest(std::ostream& os, bool inject_gradient_fault) {
    if (inject_gradient_fault) debug::gradient_fault.store(0.02);

    std::vector<Check> checks;

    checks.push_back({"fold(unfold(x)) bit-exact identity", "exact", [] {
        CounterRng rng(11);
        for (int rep = 0; rep < 5; ++rep) {
            TensorD x = TensorD::rand_normal({2, 3, 12, 8}, rng);
            TensorD y = fold_patches(unfold_patches(x, 3, 4), 2, 3, 12, 8, 3, 4);
            if (x.vec() != y.vec()) return false;
        }
        return true;
    }});

    checks.push_back({"softmax rows sum to 1", "1e-12", [] {
        CounterRng rng(12);
        TensorD x = TensorD::rand_normal({4, 9}, rng);
        TensorD y = softmax(x, 1);
        for (int r = 0; r < 4; ++r) {
            double s = 0.0;
            for (int c = 0; c < 9; ++c) s += y.data()[r * 9 + c];
            if (std::abs(s - 1.0) > 1e-12) return false;
        }
        return true;
    }});

    checks.push_back({"softmax shift invariance (+1e4)", "1e-6", [] {
        CounterRng rng(13);
        TensorD x = TensorD::rand_normal({3, 7}, rng);
        TensorD xs = add_scalar(x, 1e4);
        TensorD a = softmax(x, 1), b = softmax(xs, 1);
        for (std::int64_t i = 0; i < a.numel(); ++i)
            if (std::abs(a.data()[i] - b.data()[i]) > 1e-6) return false;
        return true;
    }});

    checks.push_back({"linear gradient vs finite differences", "1e-4", [] {
        CounterRng rng(14);
        TensorD x = TensorD::rand_normal({3, 5}, rng).set_requires_grad(true);
        TensorD w = TensorD::rand_normal({4, 5}, rng).set_requires_grad(true);
        TensorD b = TensorD::rand_normal({4}, rng).set_requires_grad(true);
        auto loss = [&] { return mean_all(mul(linear(x, w, b), linear(x, w, b))); };
        return fd_max_rel_error(loss, {x, w, b}) <= 1e-4;
    }});

    checks.push_back({"conv2d gradient vs finite differences", "1e-4", [] {
        CounterRng rng(15);
        TensorD x = TensorD::rand_normal({2, 3, 6, 5}, rng).set_requires_grad(true);
        TensorD w = TensorD::rand_normal({4, 3, 3, 3}, rng).set_requires_grad(true);
        TensorD b = TensorD::rand_normal({4}, rng).set_requires_grad(true);
        auto loss = [&] {
            TensorD y = conv2d(x, w, b, 1, 1);
            return mean_all(mul(y, y));
        };
        return fd_max_rel_error(loss, {x, w, b}) <= 1e-4;
    }});

    checks.push_back({"mhsa gradient vs finite differences", "1e-4", [] {
        CounterRng rng(16);
        MultiheadSelfAttention<double> mhsa;
        mhsa.init(8, 2, 0.0, 1, 0, rng);
        TensorD x = TensorD::rand_normal({2, 4, 8}, rng).set_requires_grad(true);
        auto loss = [&] {
            TensorD y = mhsa.forward(x, false);
            return mean_all(mul(y, y));
        };
        std::vector<TensorD> leaves = {x, mhsa.q_proj.weight, mhsa.v_proj.weight};
        return fd_max_rel_error(loss, leaves) <= 1e-4;
    }});

    checks.push_back({"adpit matches brute-force permutation minimum", "exact", [] {
        CounterRng rng(17);
        for (int rep = 0; rep < 20; ++rep) {
            TensorD pred = TensorD::rand_uniform({1, 1, 3, 3, 1}, rng, -1.0, 1.0);
            ClassFrameTargets sets = make_target_sets(1, 1, 1);
            Vec3 a{1, 0, 0}, b{0, 1, 0}, c{0, 0, 1};
            sets.add_event(0, 0, 0, a);
            sets.add_event(0, 0, 0, b);
            sets.add_event(0, 0, 0, c);
            const double got = adpit_loss(pred, sets).item();
            // independent brute force over all 6 permutations
            const int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2},
                                     {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
            const Vec3 evs[3] = {a, b, c};
            double best = 1e300;
            for (const auto& p : perms) {
                double s = 0.0;
                for (int track = 0; track < 3; ++track)
                    for (int axis = 0; axis < 3; ++axis) {
                        const double d = pred.data()[track * 3 + axis] - evs[p[track]][axis];
                        s += d * d;
                    }
                best = std::min(best, s / 9.0);
            }
            if (got != best) return false;
        }
        return true;
    }});

    checks.push_back({"metrics: perfect prediction scores 0", "exact", [] {
        EventList ref;
        for (int f = 0; f < 10; ++f) ref.push_back({f, 3, 0, 45.0, -20.0});
        MetricsReport r = evaluate_seld(decoded_from_events(ref), ref, 13);
        return r.er == 0.0 && r.f == 1.0 && r.le_deg == 0.0 && r.lr == 1.0 && r.seld_score == 0.0;
    }});

    checks.push_back({"metrics: SELD score identity", "1e-12", [] {
        CounterRng rng(18);
        EventList ref, pred;
        for (int f = 0; f < 30; ++f) {
            if (rng.uniform() < 0.7)
                ref.push_back({f, static_cast<int>(rng.uniform_int(0, 3)), 0,
                               static_cast<double>(rng.uniform_int(-180, 179)),
                               static_cast<double>(rng.uniform_int(-60, 60))});
            if (rng.uniform() < 0.7)
                pred.push_back({f, static_cast<int>(rng.uniform_int(0, 3)), 0,
                                static_cast<double>(rng.uniform_int(-180, 179)),
                                static_cast<double>(rng.uniform_int(-60, 60))});
        }
        MetricsReport r = evaluate_seld(decoded_from_events(pred), ref, 13);
        const double expect = (r.er + (1.0 - r.f) + r.le_deg / 180.0 + (1.0 - r.lr)) / 4.0;
        return std::abs(r.seld_score - expect) <= 1e-12;
    }});

    checks.push_back({"tri-stage schedule: endpoints and continuity", "1e-9", [] {
        TrainConfig cfg;
        const std::int64_t total = 1000;
        if (lr_at(0, total, cfg) != 0.0) return false;
        const std::int64_t ramp = static_cast<std::int64_t>(std::llround(cfg.ramp_frac * total));
        if (std::abs(lr_at(ramp, total, cfg) - cfg.lr_peak) > 1e-15) return false;
        if (std::abs(lr_at(total - 1, total, cfg) - cfg.lr_peak * cfg.final_lr_ratio) > 1e-9)
            return false;
        const double max_jump = cfg.lr_peak / static_cast<double>(ramp) * (1.0 + 1e-9);
        for (std::int64_t s = 1; s < total; ++s)
            if (std::abs(lr_at(s, total, cfg) - lr_at(s - 1, total, cfg)) > max_jump) return false;
        return true;
    }});

    int failed = 0;
    for (auto& c : checks) {
        bool ok = false;
        try {
            ok = c.run();
        } catch (const std::exception& e) {
            os << "[FAIL] " << c.name << " (exception: " << e.what() << ")\n";
            ++failed;
            continue;
        }
        os << (ok ? "[PASS] " : "[FAIL] ") << c.name << " (tolerance: " << c.tolerance << ")\n";
        if (!ok) ++failed;
    }
    os << (failed == 0 ? "selftest: all " : "selftest: FAILED ") << checks.size() - failed << "/"
       << checks.size() << " checks passed\n";

    if (inject_gradient_fault) debug::gradient_fault.store(0.0);
    return failed;
}

}  // namespace seld
