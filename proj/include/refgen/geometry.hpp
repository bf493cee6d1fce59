#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "refgen/util.hpp"

namespace refgen {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3() = default;
  Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
  Vec3& operator+=(const Vec3& o) {
    x += o.x;
    y += o.y;
    z += o.z;
    return *this;
  }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const {
    double n = norm();
    return n > 0 ? (*this) / n : Vec3{0, 0, 0};
  }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<Vec3> colors;  // optional, parallel to vertices (may be empty)
  std::vector<std::array<int, 3>> triangles;

  std::size_t vertex_count() const { return vertices.size(); }
  std::size_t triangle_count() const { return triangles.size(); }
};

// Triangles-only OBJ. Vertex colors use the common "v x y z r g b" extension.
TriMesh load_obj(const std::string& path);
void save_obj(const TriMesh& mesh, const std::string& path);

// Exact signed-distance oracle. Negative inside.
class PriorSdf {
 public:
  virtual ~PriorSdf() = default;
  virtual double sdf(const Vec3& p) const = 0;
  virtual Vec3 sample_surface(Rng& rng) const = 0;
  Vec3 gradient(const Vec3& p, double h = 1e-5) const;
};

class SpherePrior : public PriorSdf {
 public:
  SpherePrior(Vec3 center, double radius) : center_(center), radius_(radius) {}
  double sdf(const Vec3& p) const override { return (p - center_).norm() - radius_; }
  Vec3 sample_surface(Rng& rng) const override;

 private:
  Vec3 center_;
  double radius_;
};

class CapsulePrior : public PriorSdf {
 public:
  CapsulePrior(Vec3 a, Vec3 b, double radius) : a_(a), b_(b), radius_(radius) {}
  double sdf(const Vec3& p) const override;
  Vec3 sample_surface(Rng& rng) const override;

 private:
  Vec3 a_, b_, radius_scratch_unused_{};
  double radius_;
};

// Union of several primitives via min(). Exact outside, sign-correct inside.
class UnionPrior : public PriorSdf {
 public:
  void add(std::shared_ptr<PriorSdf> p) { parts_.push_back(std::move(p)); }
  double sdf(const Vec3& p) const override;
  Vec3 sample_surface(Rng& rng) const override;

 private:
  std::vector<std::shared_ptr<PriorSdf>> parts_;
};

// Watertight-mesh SDF: closest-point distance, sign from the generalized
// winding number.
class MeshPrior : public PriorSdf {
 public:
  explicit MeshPrior(TriMesh mesh);
  double sdf(const Vec3& p) const override;
  Vec3 sample_surface(Rng& rng) const override;
  const TriMesh& mesh() const { return mesh_; }

 private:
  double unsigned_distance(const Vec3& p) const;
  double winding_number(const Vec3& p) const;
  TriMesh mesh_;
  std::vector<double> tri_area_cdf_;
  double total_area_ = 0;
};

// Marching cubes over a scalar grid sampled on res^3 lattice points spanning
// [lo, hi]^3. Vertices on shared lattice edges are welded, so closed smooth
// level sets come out as closed 2-manifolds.
TriMesh marching_cubes(const std::vector<double>& values, int res, double lo, double hi);

struct MeshStats {
  std::size_t vertices = 0;
  std::size_t edges = 0;
  std::size_t faces = 0;
  bool closed = false;  // every edge shared by exactly two triangles
  long long euler_characteristic = 0;
};
MeshStats mesh_stats(const TriMesh& mesh);

}  // namespace refgen
