#pragma once

#include "clu/dataset.hpp"
#include "clu/tensor.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace clu {

struct Centroid {
    ClassId class_id = 0;
    std::vector<double> vector;
    std::size_t sample_count = 0;
};

// Exact per-class means of [n x d] embeddings, ascending by class id.
std::vector<Centroid> centroids(const Tensor& embeddings, std::span<const ClassId> labels);

struct EscapeOptions {
    std::size_t iters = 500;
    double step = 0.05;  // initial angular step, cosine-decayed to zero
    std::size_t restarts = 16;
    std::uint64_t seed = 0;
    bool smooth = false;  // log-sum-exp surrogate instead of the hard max
    double temperature = 50.0;
};

struct EscapeTarget {
    std::vector<double> direction;  // unit vector
    double lambda_esc = 0.0;
    std::vector<double> point;      // lambda_esc * direction
    double minimax_value = 0.0;     // max_i <direction, c_i>, recomputed exactly
};

// max_i <d, c_i>
double max_alignment(std::span<const double> direction, std::span<const Centroid> retain);

// Unit direction approximately minimizing max_i <d, c_i>: projected
// subgradient descent on the sphere, best of several random starts. Only
// direction and minimax_value are filled in.
EscapeTarget solve_escape_direction(std::span<const Centroid> retain, const EscapeOptions& options);

std::vector<double> escape_point(std::span<const double> direction, double lambda_esc);

// Solve + scale in one step.
EscapeTarget compute_escape_target(std::span<const Centroid> retain, double lambda_esc, const EscapeOptions& options);

// Mean squared distance between every row of [b x d] embeddings and target.
Tensor forget_loss(const Tensor& embeddings, std::span<const double> target);

struct GeometrySnapshot {
    std::vector<Centroid> centroids;
    Tensor embeddings;  // [n x d]; may be empty (0 rows)
    std::vector<ClassId> labels;
};

// CSV rows (phase, class_id, kind, v0..v{d-1}) for offline plotting.
void export_geometry(const GeometrySnapshot& before, const GeometrySnapshot& after, const EscapeTarget& target,
                     const std::string& path);

}  // namespace clu
