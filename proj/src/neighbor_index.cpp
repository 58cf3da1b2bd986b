#include "mlknn/neighbor_index.hpp"

#include "mlknn/error.hpp"
#include "mlknn/timing.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace mlknn {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kRelativeSlack = 1e-9;

using Candidate = std::pair<double, std::size_t>;  // (distance, index), compared lexicographically

class TopK {
public:
    explicit TopK(std::size_t k) : k_(k) { heap_.reserve(k + 1); }

    void offer(double d, std::size_t i) {
        const Candidate c{d, i};
        if (heap_.size() < k_) {
            heap_.push_back(c);
            std::push_heap(heap_.begin(), heap_.end());
        } else if (c < heap_.front()) {
            std::pop_heap(heap_.begin(), heap_.end());
            heap_.back() = c;
            std::push_heap(heap_.begin(), heap_.end());
        }
    }

    // A region whose distances are all >= bound can still hold an accepted
    // candidate when bound <= worst (equal distance, lower index).
    bool may_contain(double bound) const { return heap_.size() < k_ || bound <= heap_.front().first; }

    NeighborSet finish(std::span<const double> labels) {
        std::sort_heap(heap_.begin(), heap_.end());
        NeighborSet ns;
        for (const auto& [d, i] : heap_) {
            ns.indices.push_back(i);
            ns.distances.push_back(d);
            ns.labels.push_back(labels[i]);
        }
        return ns;
    }

private:
    std::size_t k_;
    std::vector<Candidate> heap_;
};

struct Probe {
    Vector z;                          // searched-space coordinates (global metrics)
    const LocalDescriptor* local = nullptr;
    double self_k = 1.0;
};

}  // namespace

double squared_distance(const double* a, const double* b, std::size_t dim) {
    double s = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
        const double t = a[d] - b[d];
        s += t * t;
    }
    return s;
}

std::string to_string(Backend b) {
    switch (b) {
        case Backend::automatic: return "automatic";
        case Backend::kd_tree: return "kd_tree";
        case Backend::ball_tree: return "ball_tree";
        case Backend::vp_tree: return "vp_tree";
        case Backend::brute: return "brute";
    }
    return "?";
}

Backend parse_backend(std::string_view name) {
    for (Backend b : {Backend::automatic, Backend::kd_tree, Backend::ball_tree, Backend::vp_tree, Backend::brute})
        if (to_string(b) == name) return b;
    throw ConfigError("unknown neighbour backend '" + std::string(name) + "'");
}

std::string to_string(MetricKind m) {
    switch (m) {
        case MetricKind::euclidean: return "euclidean";
        case MetricKind::mahalanobis: return "mahalanobis";
        case MetricKind::kernel_induced: return "kernel_induced";
    }
    return "?";
}

std::uint64_t MetricSpec::fingerprint() const {
    std::uint64_t h = fnv1a64(to_string(kind));
    if (kind == MetricKind::kernel_induced) h = fnv1a64(kernel.to_json().dump(), h);
    if (transform) {
        const auto& A = transform->A;
        h = fnv1a64(std::string_view(reinterpret_cast<const char*>(A.data()), A.size() * sizeof(double)), h);
        h = fnv1a64(std::string_view(reinterpret_cast<const char*>(transform->mean.data()),
                                     transform->mean.size() * sizeof(double)),
                    h);
        h = fnv1a64(std::string_view(reinterpret_cast<const char*>(transform->scale.data()),
                                     transform->scale.size() * sizeof(double)),
                    h);
    }
    return h;
}

NeighborSet NeighborSet::prefix(std::size_t k) const {
    NeighborSet out;
    const auto m = std::min(k, size());
    out.indices.assign(indices.begin(), indices.begin() + static_cast<std::ptrdiff_t>(m));
    out.distances.assign(distances.begin(), distances.begin() + static_cast<std::ptrdiff_t>(m));
    out.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(m));
    return out;
}

Backend auto_backend(std::size_t n, std::size_t dim, MetricKind metric) {
    if (n < 500) return Backend::brute;
    if (metric == MetricKind::kernel_induced) return Backend::vp_tree;
    return dim <= 30 ? Backend::kd_tree : Backend::vp_tree;
}

struct NeighborIndex::Impl {
    MetricSpec metric;
    IndexOptions options;
    Backend backend = Backend::brute;
    DescriptorBatch points;
    std::vector<double> labels;
    std::size_t n = 0;
    std::size_t dim = 0;
    Vector self_k;          // local kernel-induced metric
    double max_self_k = 1.0;
    double build_time = 0.0;
    std::vector<std::size_t> perm;

    struct KdNode {
        std::size_t begin, end;
        int left = -1, right = -1;
        std::vector<double> lo, hi;
    };
    struct BallNode {
        std::size_t begin, end;
        int left = -1, right = -1;
        Vector center;
        double radius = 0.0;
    };
    struct VpNode {
        std::size_t point;
        double mu = 0.0;
        int left = -1, right = -1;
    };
    std::vector<KdNode> kd;
    std::vector<BallNode> ball;
    std::vector<VpNode> vp;
    int root = -1;

    const RowMatrix& coords() const { return std::get<RowMatrix>(points); }
    const double* row(std::size_t i) const { return coords().data() + i * dim; }

    bool is_local() const { return std::holds_alternative<std::vector<LocalDescriptor>>(points); }
    const LocalDescriptor& local(std::size_t i) const { return std::get<std::vector<LocalDescriptor>>(points)[i]; }

    double kernel_from_sq(double sq) const { return std::exp(-sq / (2.0 * metric.kernel.sigma * metric.kernel.sigma)); }

    double dist(const Probe& p, std::size_t i) const {
        if (metric.kind != MetricKind::kernel_induced) return std::sqrt(squared_distance(p.z.data(), row(i), dim));
        if (!is_local()) return induced_distance(1.0, 1.0, kernel_from_sq(squared_distance(p.z.data(), row(i), dim)));
        const auto& k = metric.kernel;
        const double kab = local_sum_kernel(*p.local, local(i), k.sigma, k.match_elements);
        if (k.normalize) return induced_distance(1.0, 1.0, kab / std::sqrt(p.self_k * self_k[static_cast<Eigen::Index>(i)]));
        return induced_distance(p.self_k, self_k[static_cast<Eigen::Index>(i)], kab);
    }

    double dist_points(std::size_t i, std::size_t j) const {
        if (metric.kind != MetricKind::kernel_induced) return std::sqrt(squared_distance(row(i), row(j), dim));
        if (!is_local()) return induced_distance(1.0, 1.0, kernel_from_sq(squared_distance(row(i), row(j), dim)));
        const auto& k = metric.kernel;
        const double kab = local_sum_kernel(local(i), local(j), k.sigma, k.match_elements);
        const double ki = self_k[static_cast<Eigen::Index>(i)], kj = self_k[static_cast<Eigen::Index>(j)];
        if (k.normalize) return induced_distance(1.0, 1.0, kab / std::sqrt(ki * kj));
        return induced_distance(ki, kj, kab);
    }

    // Bound on rounding error in a triangle-inequality based lower bound.
    double slack(const Probe& p, double a, double b) const {
        double s = kRelativeSlack * (a + b) + 1e-300;
        if (metric.kind == MetricKind::kernel_induced) {
            const double kmax = (metric.kernel.normalize || !is_local()) ? 1.0 : std::max({1.0, max_self_k, p.self_k});
            s += 4.0 * std::sqrt(16.0 * std::numeric_limits<double>::epsilon() * kmax);
        }
        return s;
    }

    Probe probe_from_vector(const Eigen::Ref<const Vector>& x) const {
        if (is_local()) throw ShapeError("index holds local descriptors; query with a LocalDescriptor");
        Probe p;
        if (metric.kind == MetricKind::mahalanobis) {
            RowMatrix one(1, x.size());
            one.row(0) = x.transpose();
            p.z = transform(*metric.transform, one).row(0).transpose();
        } else {
            p.z = x;
        }
        if (static_cast<std::size_t>(p.z.size()) != dim)
            throw ShapeError("query has dimension " + std::to_string(p.z.size()) + ", index expects " + std::to_string(dim));
        return p;
    }

    Probe probe_from_local(const LocalDescriptor& x) const {
        if (!is_local()) throw ShapeError("index holds global descriptors; query with a vector");
        Probe p;
        p.local = &x;
        p.self_k = local_sum_kernel(x, x, metric.kernel.sigma, metric.kernel.match_elements);
        return p;
    }

    Probe probe_from_stored(std::size_t i) const {
        if (i >= n) throw ShapeError("stored index out of range");
        Probe p;
        if (is_local()) {
            p.local = &local(i);
            p.self_k = self_k[static_cast<Eigen::Index>(i)];
        } else {
            p.z = coords().row(static_cast<Eigen::Index>(i)).transpose();
        }
        return p;
    }

    // ---- kd tree ----
    int build_kd(std::size_t begin, std::size_t end) {
        KdNode node{begin, end, -1, -1, std::vector<double>(dim, kInf), std::vector<double>(dim, -kInf)};
        for (std::size_t p = begin; p < end; ++p) {
            const double* r = row(perm[p]);
            for (std::size_t d = 0; d < dim; ++d) {
                node.lo[d] = std::min(node.lo[d], r[d]);
                node.hi[d] = std::max(node.hi[d], r[d]);
            }
        }
        const int id = static_cast<int>(kd.size());
        if (end - begin > options.leaf_size) {
            std::size_t split = 0;
            double spread = -1.0;
            for (std::size_t d = 0; d < dim; ++d)
                if (node.hi[d] - node.lo[d] > spread) {
                    spread = node.hi[d] - node.lo[d];
                    split = d;
                }
            if (spread > 0) {
                const std::size_t mid = begin + (end - begin) / 2;
                std::nth_element(perm.begin() + static_cast<std::ptrdiff_t>(begin), perm.begin() + static_cast<std::ptrdiff_t>(mid),
                                 perm.begin() + static_cast<std::ptrdiff_t>(end), [&](std::size_t a, std::size_t b) {
                                     const double xa = row(a)[split], xb = row(b)[split];
                                     return xa < xb || (xa == xb && a < b);
                                 });
                kd.push_back(std::move(node));
                const int l = build_kd(begin, mid);
                const int r = build_kd(mid, end);
                kd[static_cast<std::size_t>(id)].left = l;
                kd[static_cast<std::size_t>(id)].right = r;
                return id;
            }
        }
        kd.push_back(std::move(node));
        return id;
    }

    double box_bound(const Probe& p, const KdNode& node) const {
        double s = 0.0;
        for (std::size_t d = 0; d < dim; ++d) {
            const double q = p.z[static_cast<Eigen::Index>(d)];
            double gap = 0.0;
            if (q < node.lo[d]) gap = node.lo[d] - q;
            else if (q > node.hi[d]) gap = q - node.hi[d];
            s += gap * gap;
        }
        return std::sqrt(s);
    }

    void search_kd(int id, const Probe& p, TopK& top) const {
        const auto& node = kd[static_cast<std::size_t>(id)];
        if (node.left < 0) {
            for (std::size_t q = node.begin; q < node.end; ++q) top.offer(dist(p, perm[q]), perm[q]);
            return;
        }
        const double bl = box_bound(p, kd[static_cast<std::size_t>(node.left)]);
        const double br = box_bound(p, kd[static_cast<std::size_t>(node.right)]);
        const int first = bl <= br ? node.left : node.right;
        const int second = bl <= br ? node.right : node.left;
        const double b1 = std::min(bl, br), b2 = std::max(bl, br);
        if (top.may_contain(b1)) search_kd(first, p, top);
        if (top.may_contain(b2)) search_kd(second, p, top);
    }

    // ---- ball tree ----
    int build_ball(std::size_t begin, std::size_t end) {
        BallNode node{begin, end, -1, -1, Vector::Zero(static_cast<Eigen::Index>(dim)), 0.0};
        for (std::size_t q = begin; q < end; ++q)
            node.center += Eigen::Map<const Vector>(row(perm[q]), static_cast<Eigen::Index>(dim));
        node.center /= static_cast<double>(end - begin);
        for (std::size_t q = begin; q < end; ++q)
            node.radius = std::max(node.radius, std::sqrt(squared_distance(node.center.data(), row(perm[q]), dim)));
        const int id = static_cast<int>(ball.size());
        if (end - begin > options.leaf_size) {
            std::size_t split = 0;
            double spread = -1.0;
            for (std::size_t d = 0; d < dim; ++d) {
                double lo = kInf, hi = -kInf;
                for (std::size_t q = begin; q < end; ++q) {
                    lo = std::min(lo, row(perm[q])[d]);
                    hi = std::max(hi, row(perm[q])[d]);
                }
                if (hi - lo > spread) {
                    spread = hi - lo;
                    split = d;
                }
            }
            if (spread > 0) {
                const std::size_t mid = begin + (end - begin) / 2;
                std::nth_element(perm.begin() + static_cast<std::ptrdiff_t>(begin), perm.begin() + static_cast<std::ptrdiff_t>(mid),
                                 perm.begin() + static_cast<std::ptrdiff_t>(end), [&](std::size_t a, std::size_t b) {
                                     const double xa = row(a)[split], xb = row(b)[split];
                                     return xa < xb || (xa == xb && a < b);
                                 });
                ball.push_back(std::move(node));
                const int l = build_ball(begin, mid);
                const int r = build_ball(mid, end);
                ball[static_cast<std::size_t>(id)].left = l;
                ball[static_cast<std::size_t>(id)].right = r;
                return id;
            }
        }
        ball.push_back(std::move(node));
        return id;
    }

    double ball_bound(const Probe& p, const BallNode& node) const {
        const double dc = std::sqrt(squared_distance(p.z.data(), node.center.data(), dim));
        return dc - node.radius - slack(p, dc, node.radius);
    }

    void search_ball(int id, const Probe& p, TopK& top) const {
        const auto& node = ball[static_cast<std::size_t>(id)];
        if (node.left < 0) {
            for (std::size_t q = node.begin; q < node.end; ++q) top.offer(dist(p, perm[q]), perm[q]);
            return;
        }
        const double bl = ball_bound(p, ball[static_cast<std::size_t>(node.left)]);
        const double br = ball_bound(p, ball[static_cast<std::size_t>(node.right)]);
        const int first = bl <= br ? node.left : node.right;
        const int second = bl <= br ? node.right : node.left;
        const double b1 = std::min(bl, br), b2 = std::max(bl, br);
        if (top.may_contain(b1)) search_ball(first, p, top);
        if (top.may_contain(b2)) search_ball(second, p, top);
    }

    // ---- vantage-point tree ----
    int build_vp(std::size_t begin, std::size_t end, std::mt19937_64& rng, std::vector<double>& scratch) {
        if (begin >= end) return -1;
        const auto pick = begin + static_cast<std::size_t>(uniform_below(rng, end - begin));
        std::swap(perm[begin], perm[pick]);
        const std::size_t v = perm[begin];
        const int id = static_cast<int>(vp.size());
        vp.push_back({v, 0.0, -1, -1});
        if (end - begin == 1) return id;
        for (std::size_t q = begin + 1; q < end; ++q) scratch[perm[q]] = dist_points(v, perm[q]);
        const std::size_t mid = begin + 1 + (end - begin - 1) / 2;
        std::nth_element(perm.begin() + static_cast<std::ptrdiff_t>(begin + 1), perm.begin() + static_cast<std::ptrdiff_t>(mid),
                         perm.begin() + static_cast<std::ptrdiff_t>(end), [&](std::size_t a, std::size_t b) {
                             return scratch[a] < scratch[b] || (scratch[a] == scratch[b] && a < b);
                         });
        const double mu = scratch[perm[mid]];
        const int l = build_vp(begin + 1, mid, rng, scratch);
        const int r = build_vp(mid, end, rng, scratch);
        auto& node = vp[static_cast<std::size_t>(id)];
        node.mu = mu;
        node.left = l;
        node.right = r;
        return id;
    }

    void search_vp(int id, const Probe& p, TopK& top) const {
        const auto& node = vp[static_cast<std::size_t>(id)];
        const double dq = dist(p, node.point);
        top.offer(dq, node.point);
        const double s = slack(p, dq, node.mu);
        // left holds d(v, x) <= mu, right holds d(v, x) >= mu
        const double bl = dq - node.mu - s;
        const double br = node.mu - dq - s;
        const bool left_first = dq < node.mu;
        const int first = left_first ? node.left : node.right;
        const int second = left_first ? node.right : node.left;
        const double b1 = left_first ? bl : br;
        const double b2 = left_first ? br : bl;
        if (first >= 0 && top.may_contain(b1)) search_vp(first, p, top);
        if (second >= 0 && top.may_contain(b2)) search_vp(second, p, top);
    }

    NeighborSet search(const Probe& p, std::size_t k) const {
        k = std::min(k, n);
        TopK top(k);
        if (k == 0) return top.finish(labels);
        switch (backend) {
            case Backend::kd_tree: search_kd(root, p, top); break;
            case Backend::ball_tree: search_ball(root, p, top); break;
            case Backend::vp_tree: search_vp(root, p, top); break;
            default:
                for (std::size_t i = 0; i < n; ++i) top.offer(dist(p, i), i);
        }
        return top.finish(labels);
    }
};

NeighborIndex::NeighborIndex() : impl_(std::make_unique<Impl>()) {}
NeighborIndex::~NeighborIndex() = default;
NeighborIndex::NeighborIndex(const NeighborIndex& o) : impl_(std::make_unique<Impl>(*o.impl_)) {}
NeighborIndex& NeighborIndex::operator=(const NeighborIndex& o) {
    if (this != &o) impl_ = std::make_unique<Impl>(*o.impl_);
    return *this;
}
NeighborIndex::NeighborIndex(NeighborIndex&&) noexcept = default;
NeighborIndex& NeighborIndex::operator=(NeighborIndex&&) noexcept = default;

NeighborIndex NeighborIndex::build(DescriptorBatch points, std::vector<double> labels, MetricSpec metric,
                                   IndexOptions options) {
    return create(std::move(points), std::move(labels), std::move(metric), options, false);
}

NeighborIndex NeighborIndex::restore(DescriptorBatch searched_points, std::vector<double> labels, MetricSpec metric,
                                     IndexOptions options) {
    return create(std::move(searched_points), std::move(labels), std::move(metric), options, true);
}

NeighborIndex NeighborIndex::create(DescriptorBatch points, std::vector<double> labels, MetricSpec metric,
                                    IndexOptions options, bool pretransformed) {
    const std::size_t n = batch_size(points);
    if (n == 0) throw ConfigError("cannot build a neighbour index over no points");
    if (labels.size() != n) throw ShapeError("neighbour index: point count differs from label count");
    if (metric.kind == MetricKind::mahalanobis && !metric.transform)
        throw ConfigError("Mahalanobis metric needs a transform");
    if (std::holds_alternative<std::vector<LocalDescriptor>>(points) && metric.kind != MetricKind::kernel_induced)
        throw ConfigError("local descriptors can only be searched with a kernel-induced metric");
    if (metric.kind == MetricKind::kernel_induced) metric.kernel.validate();

    NeighborIndex index;
    auto& im = *index.impl_;
    im.build_time = capture_timing([&] {
        im.metric = std::move(metric);
        im.options = options;
        im.labels = std::move(labels);
        im.n = n;
        if (im.metric.kind == MetricKind::mahalanobis && !pretransformed)
            im.points = transform(*im.metric.transform, std::get<RowMatrix>(points));
        else
            im.points = std::move(points);
        if (const auto* m = std::get_if<RowMatrix>(&im.points)) {
            im.dim = static_cast<std::size_t>(m->cols());
        } else {
            const auto& local = std::get<std::vector<LocalDescriptor>>(im.points);
            im.dim = static_cast<std::size_t>(local.front().rows.cols());
            im.self_k = self_kernels(local, im.metric.kernel);
            im.max_self_k = im.self_k.maxCoeff();
        }

        Backend b = options.backend == Backend::automatic ? auto_backend(n, im.dim, im.metric.kind) : options.backend;
        if ((b == Backend::kd_tree || b == Backend::ball_tree) && im.metric.kind == MetricKind::kernel_induced)
            throw ConfigError(to_string(b) + " needs coordinates; kernel-induced metrics use vp_tree or brute");
        im.backend = b;
        im.perm.resize(n);
        std::iota(im.perm.begin(), im.perm.end(), std::size_t{0});
        switch (b) {
            case Backend::kd_tree: im.root = im.build_kd(0, n); break;
            case Backend::ball_tree: im.root = im.build_ball(0, n); break;
            case Backend::vp_tree: {
                std::mt19937_64 rng(options.seed);
                std::vector<double> scratch(n, 0.0);
                im.root = im.build_vp(0, n, rng, scratch);
                break;
            }
            default: break;
        }
    });
    return index;
}

NeighborSet NeighborIndex::query(const Eigen::Ref<const Vector>& x, std::size_t k) const {
    if (k == 0) throw ConfigError("k must be at least 1");
    if (k > impl_->n) log_warning("k=" + std::to_string(k) + " exceeds index size " + std::to_string(impl_->n) + "; clamping");
    return impl_->search(impl_->probe_from_vector(x), k);
}

NeighborSet NeighborIndex::query(const LocalDescriptor& x, std::size_t k) const {
    if (k == 0) throw ConfigError("k must be at least 1");
    if (k > impl_->n) log_warning("k=" + std::to_string(k) + " exceeds index size " + std::to_string(impl_->n) + "; clamping");
    return impl_->search(impl_->probe_from_local(x), k);
}

NeighborSet NeighborIndex::query_stored(std::size_t i, std::size_t k) const {
    if (k == 0) throw ConfigError("k must be at least 1");
    return impl_->search(impl_->probe_from_stored(i), k);
}

std::vector<NeighborSet> NeighborIndex::query_batch(const DescriptorBatch& queries, std::size_t k) const {
    if (k == 0) throw ConfigError("k must be at least 1");
    if (k > impl_->n) log_warning("k=" + std::to_string(k) + " exceeds index size " + std::to_string(impl_->n) + "; clamping");
    const std::size_t m = batch_size(queries);
    std::vector<NeighborSet> out(m);
    std::vector<Probe> probes(m);
    if (const auto* X = std::get_if<RowMatrix>(&queries)) {
        if (impl_->is_local()) throw ShapeError("index holds local descriptors; query with local descriptors");
        RowMatrix Z = impl_->metric.kind == MetricKind::mahalanobis ? transform(*impl_->metric.transform, *X) : *X;
        if (static_cast<std::size_t>(Z.cols()) != impl_->dim)
            throw ShapeError("queries have dimension " + std::to_string(Z.cols()) + ", index expects " +
                             std::to_string(impl_->dim));
        for (std::size_t q = 0; q < m; ++q) probes[q].z = Z.row(static_cast<Eigen::Index>(q)).transpose();
    } else {
        const auto& local = std::get<std::vector<LocalDescriptor>>(queries);
        for (std::size_t q = 0; q < m; ++q) probes[q] = impl_->probe_from_local(local[q]);
    }
    std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic, 16)
    for (std::ptrdiff_t q = 0; q < static_cast<std::ptrdiff_t>(m); ++q) {
        try {
            out[static_cast<std::size_t>(q)] = impl_->search(probes[static_cast<std::size_t>(q)], k);
        } catch (...) {
#pragma omp critical
            if (!failure) failure = std::current_exception();
        }
    }
    if (failure) std::rethrow_exception(failure);
    return out;
}

double NeighborIndex::distance_to(const Eigen::Ref<const Vector>& x, std::size_t i) const {
    return impl_->dist(impl_->probe_from_vector(x), i);
}

std::size_t NeighborIndex::size() const { return impl_->n; }
std::size_t NeighborIndex::dimension() const { return impl_->dim; }
Backend NeighborIndex::backend() const { return impl_->backend; }
const MetricSpec& NeighborIndex::metric() const { return impl_->metric; }
std::span<const double> NeighborIndex::labels() const { return impl_->labels; }
const DescriptorBatch& NeighborIndex::points() const { return impl_->points; }
double NeighborIndex::build_time_cpu_s() const { return impl_->build_time; }
IndexOptions NeighborIndex::options() const { return impl_->options; }

}  // namespace mlknn
