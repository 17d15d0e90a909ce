#include "clu/escape.hpp"

#include "clu/errors.hpp"
#include "clu/ops.hpp"
#include "clu/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>

namespace clu {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

double norm(std::span<const double> a) {
    return std::sqrt(dot(a, a));
}

void normalize(std::vector<double>& v) {
    const double n = norm(v);
    for (auto& x : v) {
        x /= n;
    }
}

// Tolerances for treating two restarts as equally good and equally placed.
constexpr double kTieValueTol = 1e-6;
constexpr double kTieCoordTol = 1e-6;

// true when a should win the tie-break over b: lexicographically greater,
// coordinates within kTieCoordTol counting as equal.
bool lex_greater(const std::vector<double>& a, const std::vector<double>& b) {
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (std::abs(a[i] - b[i]) > kTieCoordTol) {
            return a[i] > b[i];
        }
    }
    return false;
}

}  // namespace

std::vector<Centroid> centroids(const Tensor& embeddings, std::span<const ClassId> labels) {
    if (embeddings.rank() != 2) {
        throw DimensionError("centroids: embeddings must be [n x d], got " + shape_str(embeddings.shape()));
    }
    const std::size_t n = embeddings.dim(0), d = embeddings.dim(1);
    if (n == 0) {
        throw ContractError("centroids: no embeddings");
    }
    if (labels.size() != n) {
        throw DimensionError("centroids: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                             " embeddings");
    }
    auto ev = embeddings.values();
    std::map<ClassId, Centroid> acc;
    for (std::size_t i = 0; i < n; ++i) {
        auto& c = acc[labels[i]];
        if (c.vector.empty()) {
            c.class_id = labels[i];
            c.vector.assign(d, 0.0);
        }
        for (std::size_t j = 0; j < d; ++j) {
            c.vector[j] += ev[i * d + j];
        }
        ++c.sample_count;
    }
    std::vector<Centroid> out;
    out.reserve(acc.size());
    for (auto& [id, c] : acc) {
        for (auto& v : c.vector) {
            v /= static_cast<double>(c.sample_count);
        }
        out.push_back(std::move(c));
    }
    return out;
}

double max_alignment(std::span<const double> direction, std::span<const Centroid> retain) {
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& c : retain) {
        best = std::max(best, dot(direction, c.vector));
    }
    return best;
}

EscapeTarget solve_escape_direction(std::span<const Centroid> retain, const EscapeOptions& options) {
    if (retain.empty()) {
        throw ContractError("escape solver needs at least one retain centroid");
    }
    const std::size_t dim = retain.front().vector.size();
    if (dim == 0) {
        throw ContractError("escape solver: zero-dimensional centroids");
    }
    double scale = 0.0;
    for (const auto& c : retain) {
        if (c.vector.size() != dim) {
            throw DimensionError("escape solver: centroids of different dimensions");
        }
        for (auto v : c.vector) {
            if (!std::isfinite(v)) {
                throw ContractError("escape solver: non-finite centroid for class " + std::to_string(c.class_id));
            }
        }
        scale = std::max(scale, norm(c.vector));
    }
    if (options.restarts == 0) {
        throw ConfigError("escape solver needs at least one restart");
    }

    std::vector<std::vector<double>> candidates;
    if (dim == 1) {
        candidates = {{1.0}, {-1.0}};
    } else if (scale == 0.0) {
        std::vector<double> e(dim, 0.0);
        e[0] = 1.0;
        candidates.push_back(std::move(e));
    } else {
        for (std::size_t r = 0; r < options.restarts; ++r) {
            Rng rng(derive_seed(options.seed, {0x657363ULL, r}));
            std::vector<double> d(dim);
            do {
                for (auto& x : d) {
                    x = rng.normal();
                }
            } while (norm(d) == 0.0);
            normalize(d);
            std::vector<double> best = d;
            double best_v = max_alignment(d, retain);
            std::vector<double> g(dim);
            std::vector<double> w(retain.size());
            for (std::size_t t = 0; t < options.iters; ++t) {
                const double eta = options.step * 0.5 *
                                   (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) /
                                                   static_cast<double>(options.iters)));
                std::fill(g.begin(), g.end(), 0.0);
                if (options.smooth) {
                    double mx = -std::numeric_limits<double>::infinity();
                    for (std::size_t i = 0; i < retain.size(); ++i) {
                        w[i] = options.temperature * dot(d, retain[i].vector) / scale;
                        mx = std::max(mx, w[i]);
                    }
                    double z = 0.0;
                    for (auto& wi : w) {
                        wi = std::exp(wi - mx);
                        z += wi;
                    }
                    for (std::size_t i = 0; i < retain.size(); ++i) {
                        for (std::size_t j = 0; j < dim; ++j) {
                            g[j] += (w[i] / z) * retain[i].vector[j];
                        }
                    }
                } else {
                    std::size_t arg = 0;
                    double mx = -std::numeric_limits<double>::infinity();
                    for (std::size_t i = 0; i < retain.size(); ++i) {
                        const double v = dot(d, retain[i].vector);
                        if (v > mx) {
                            mx = v;
                            arg = i;
                        }
                    }
                    g = retain[arg].vector;
                }
                // Tangent component, normalized by the largest centroid norm so
                // scaling every centroid leaves the trajectory unchanged.
                const double radial = dot(g, d);
                for (std::size_t j = 0; j < dim; ++j) {
                    d[j] -= eta * (g[j] - radial * d[j]) / scale;
                }
                normalize(d);
                const double v = max_alignment(d, retain);
                if (v < best_v) {
                    best_v = v;
                    best = d;
                }
            }
            candidates.push_back(std::move(best));
        }
    }

    double best_v = std::numeric_limits<double>::infinity();
    for (const auto& c : candidates) {
        best_v = std::min(best_v, max_alignment(c, retain));
    }
    const std::vector<double>* pick = nullptr;
    for (const auto& c : candidates) {
        if (max_alignment(c, retain) <= best_v + kTieValueTol * std::max(scale, 1.0)) {
            if (pick == nullptr || lex_greater(c, *pick)) {
                pick = &c;
            }
        }
    }
    EscapeTarget out;
    out.direction = *pick;
    out.minimax_value = max_alignment(out.direction, retain);
    return out;
}

std::vector<double> escape_point(std::span<const double> direction, double lambda_esc) {
    if (!(lambda_esc >= 0.0) || !std::isfinite(lambda_esc)) {
        throw ContractError("escape scale must be finite and non-negative");
    }
    if (std::abs(norm(direction) - 1.0) > 1e-6) {
        throw ContractError("escape direction is not a unit vector (norm " + std::to_string(norm(direction)) + ")");
    }
    std::vector<double> p(direction.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = lambda_esc * direction[i];
    }
    return p;
}

EscapeTarget compute_escape_target(std::span<const Centroid> retain, double lambda_esc, const EscapeOptions& options) {
    EscapeTarget t = solve_escape_direction(retain, options);
    t.lambda_esc = lambda_esc;
    t.point = escape_point(t.direction, lambda_esc);
    return t;
}

Tensor forget_loss(const Tensor& embeddings, std::span<const double> target) {
    if (embeddings.rank() != 2 || embeddings.dim(1) != target.size()) {
        throw DimensionError("forget_loss: embeddings " + shape_str(embeddings.shape()) +
                             " do not match target of length " + std::to_string(target.size()));
    }
    const std::size_t n = embeddings.dim(0), d = target.size();
    std::vector<double> tiled(n * d);
    for (std::size_t i = 0; i < n; ++i) {
        std::copy(target.begin(), target.end(), tiled.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    return mse(embeddings, Tensor::from({n, d}, std::move(tiled)));
}

namespace {

void write_row(std::ofstream& out, const char* phase, long long class_id, const char* kind,
               std::span<const double> v) {
    char buf[32];
    out << phase << ',' << class_id << ',' << kind;
    for (double x : v) {
        std::snprintf(buf, sizeof(buf), "%.17g", x);
        out << ',' << buf;
    }
    out << '\n';
}

void write_phase(std::ofstream& out, const char* phase, const GeometrySnapshot& snap, const EscapeTarget& target) {
    for (const auto& c : snap.centroids) {
        write_row(out, phase, c.class_id, "centroid", c.vector);
    }
    if (snap.embeddings.rank() == 2 && snap.embeddings.dim(0) > 0) {
        const std::size_t n = snap.embeddings.dim(0), d = snap.embeddings.dim(1);
        auto ev = snap.embeddings.values();
        for (std::size_t i = 0; i < n; ++i) {
            write_row(out, phase, snap.labels.at(i), "sample", ev.subspan(i * d, d));
        }
    }
    write_row(out, phase, -1, "escape", target.point);
}

}  // namespace

void export_geometry(const GeometrySnapshot& before, const GeometrySnapshot& after, const EscapeTarget& target,
                     const std::string& path) {
    const std::size_t d = target.point.size();
    auto check = [d](const GeometrySnapshot& s) {
        for (const auto& c : s.centroids) {
            if (c.vector.size() != d) {
                throw DimensionError("export_geometry: centroid dimension differs from escape target");
            }
        }
        if (s.embeddings.rank() == 2 && s.embeddings.dim(0) > 0 &&
            (s.embeddings.dim(1) != d || s.labels.size() != s.embeddings.dim(0))) {
            throw DimensionError("export_geometry: embeddings do not match labels or target dimension");
        }
    };
    check(before);
    check(after);
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot open geometry file '" + path + "' for writing");
    }
    out << "phase,class_id,kind";
    for (std::size_t j = 0; j < d; ++j) {
        out << ",v" << j;
    }
    out << '\n';
    write_phase(out, "before", before, target);
    write_phase(out, "after", after, target);
    if (!out) {
        throw IoError("failed writing geometry file '" + path + "'");
    }
}

}  // namespace clu
