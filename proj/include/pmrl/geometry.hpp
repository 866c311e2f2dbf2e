#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>
#include <vector>

namespace pmrl::geom {

struct DegeneratePlaneError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct BehindCameraError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr double kGrazingEps = 1e-12;

// Integer pixel (x,y) addresses the cell center (x+0.5, y+0.5).
inline Eigen::Vector2d pixel_center(int x, int y) {
  return {x + 0.5, y + 0.5};
}
inline Eigen::Vector3d homogeneous(const Eigen::Vector2d& p) {
  return {p.x(), p.y(), 1.0};
}

struct Camera {
  Eigen::Matrix3d K = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();  // world -> camera
  Eigen::Vector3d t = Eigen::Vector3d::Zero();
  int width = 0;
  int height = 0;
  double d_min = 0.0;
  double d_max = 0.0;

  Eigen::Vector3d center() const { return -R.transpose() * t; }
  // Unnormalized viewing ray K^-1 p~ in the camera frame (z component 1).
  Eigen::Vector3d ray(const Eigen::Vector2d& p) const {
    return K.inverse() * homogeneous(p);
  }
  void validate() const;  // throws invalid_argument on broken invariants
};

// Plane n^T X + delta = 0 in the owning reference camera frame.
struct OrientedPoint {
  Eigen::Vector3d n = Eigen::Vector3d(0, 0, -1);
  double delta = 1.0;
};

struct OrientedPointMap {
  int width = 0;
  int height = 0;
  std::vector<OrientedPoint> points;  // row-major

  OrientedPointMap() = default;
  OrientedPointMap(int w, int h) : width(w), height(h), points(w * h) {}
  OrientedPoint& at(int x, int y) { return points[y * width + x]; }
  const OrientedPoint& at(int x, int y) const { return points[y * width + x]; }
};

// d = -delta / (n . K^-1 p~); throws DegeneratePlaneError near grazing.
double depth_from_plane(const OrientedPoint& omega, const Eigen::Vector2d& p,
                        const Eigen::Matrix3d& K);

// Inverse of the above: anchors (d, n) at pixel p. Requires d > 0 and the
// normal facing the camera (n . ray < 0).
OrientedPoint plane_from_depth_normal(double d, const Eigen::Vector3d& n,
                                      const Eigen::Vector2d& p,
                                      const Eigen::Matrix3d& K);

// (R_{r->s}, t_{r->s}) with X_src = R X_ref + t.
std::pair<Eigen::Matrix3d, Eigen::Vector3d> relative_pose(const Camera& ref,
                                                          const Camera& src);

// Plane-induced homography H = K_s (R - t n^T / delta) K_r^-1 mapping
// reference pixels to source pixels for points on the plane.
Eigen::Matrix3d homography(const OrientedPoint& omega, const Camera& cam_ref,
                           const Camera& cam_src);

// Dehomogenize H * p~; returns false if the mapped point is at infinity.
bool apply_homography(const Eigen::Matrix3d& H, const Eigen::Vector2d& p,
                      Eigen::Vector2d& out);

// Pixel + camera-frame depth of a world point; throws BehindCameraError.
std::pair<Eigen::Vector2d, double> project(const Camera& cam,
                                           const Eigen::Vector3d& x_world);

Eigen::Vector3d unproject(const Camera& cam, const Eigen::Vector2d& p,
                          double depth);

// Scene camera text file: camera count, then per camera 9 K, 9 R, 3 t,
// width, height, d_min, d_max (whitespace separated decimals).
void write_cameras(const std::string& path, const std::vector<Camera>& cams);
std::vector<Camera> read_cameras(const std::string& path);

}  // namespace pmrl::geom
