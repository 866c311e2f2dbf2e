#include "pmrl/geometry.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

namespace pmrl::geom {

void Camera::validate() const {
  const Eigen::Matrix3d rtr = R.transpose() * R;
  if ((rtr - Eigen::Matrix3d::Identity()).norm() > 1e-9)
    throw std::invalid_argument("Camera: R not orthonormal");
  if (std::abs(R.determinant() - 1.0) > 1e-9)
    throw std::invalid_argument("Camera: det(R) != +1");
  if (K(0, 0) <= 0 || K(1, 1) <= 0 || K(2, 2) <= 0)
    throw std::invalid_argument("Camera: K diagonal must be positive");
  if (std::abs(K(1, 0)) > 0 || std::abs(K(2, 0)) > 0 || std::abs(K(2, 1)) > 0)
    throw std::invalid_argument("Camera: K must be upper triangular");
  if (width <= 0 || height <= 0)
    throw std::invalid_argument("Camera: non-positive image extents");
}

double depth_from_plane(const OrientedPoint& omega, const Eigen::Vector2d& p,
                        const Eigen::Matrix3d& K) {
  const Eigen::Vector3d r = K.inverse() * homogeneous(p);
  const double denom = omega.n.dot(r);
  if (std::abs(denom) < kGrazingEps)
    throw DegeneratePlaneError("depth_from_plane: grazing plane");
  return -omega.delta / denom;
}

OrientedPoint plane_from_depth_normal(double d, const Eigen::Vector3d& n,
                                      const Eigen::Vector2d& p,
                                      const Eigen::Matrix3d& K) {
  if (d <= 0.0)
    throw std::invalid_argument("plane_from_depth_normal: depth must be > 0");
  const Eigen::Vector3d r = K.inverse() * homogeneous(p);
  const double ndr = n.dot(r);
  if (std::abs(ndr) < kGrazingEps)
    throw DegeneratePlaneError("plane_from_depth_normal: grazing normal");
  if (ndr >= 0.0)
    throw std::invalid_argument(
        "plane_from_depth_normal: normal faces away from camera");
  OrientedPoint out;
  out.n = n.normalized();
  out.delta = -d * out.n.dot(r);
  return out;
}

std::pair<Eigen::Matrix3d, Eigen::Vector3d> relative_pose(const Camera& ref,
                                                          const Camera& src) {
  const Eigen::Matrix3d r = src.R * ref.R.transpose();
  const Eigen::Vector3d t = src.t - r * ref.t;
  return {r, t};
}

Eigen::Matrix3d homography(const OrientedPoint& omega, const Camera& cam_ref,
                           const Camera& cam_src) {
  if (std::abs(omega.delta) < kGrazingEps)
    throw DegeneratePlaneError("homography: plane through camera center");
  const auto [r, t] = relative_pose(cam_ref, cam_src);
  const Eigen::Matrix3d mid =
      r - t * omega.n.transpose() / omega.delta;
  return cam_src.K * mid * cam_ref.K.inverse();
}

bool apply_homography(const Eigen::Matrix3d& H, const Eigen::Vector2d& p,
                      Eigen::Vector2d& out) {
  const Eigen::Vector3d q = H * homogeneous(p);
  if (std::abs(q.z()) < 1e-15) return false;
  out = {q.x() / q.z(), q.y() / q.z()};
  return true;
}

std::pair<Eigen::Vector2d, double> project(const Camera& cam,
                                           const Eigen::Vector3d& x_world) {
  const Eigen::Vector3d xc = cam.R * x_world + cam.t;
  if (xc.z() <= 0.0)
    throw BehindCameraError("project: point behind camera");
  const Eigen::Vector3d q = cam.K * xc;
  return {{q.x() / q.z(), q.y() / q.z()}, xc.z()};
}

Eigen::Vector3d unproject(const Camera& cam, const Eigen::Vector2d& p,
                          double depth) {
  const Eigen::Vector3d xc = depth * (cam.K.inverse() * homogeneous(p));
  return cam.R.transpose() * (xc - cam.t);
}

void write_cameras(const std::string& path, const std::vector<Camera>& cams) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write cameras: " + path);
  os << std::setprecision(17);
  os << cams.size() << "\n";
  for (const auto& c : cams) {
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) os << c.K(i, j) << " ";
    os << "\n";
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) os << c.R(i, j) << " ";
    os << "\n";
    for (int i = 0; i < 3; ++i) os << c.t(i) << " ";
    os << "\n";
    os << c.width << " " << c.height << " " << c.d_min << " " << c.d_max
       << "\n";
  }
  if (!os) throw std::runtime_error("write failure: " + path);
}

std::vector<Camera> read_cameras(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read cameras: " + path);
  std::size_t count = 0;
  if (!(is >> count))
    throw std::runtime_error("camera file parse error (count): " + path);
  std::vector<Camera> cams(count);
  for (std::size_t ci = 0; ci < count; ++ci) {
    Camera& c = cams[ci];
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        if (!(is >> c.K(i, j)))
          throw std::runtime_error("camera file parse error (K, camera " +
                                   std::to_string(ci) + "): " + path);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        if (!(is >> c.R(i, j)))
          throw std::runtime_error("camera file parse error (R, camera " +
                                   std::to_string(ci) + "): " + path);
    for (int i = 0; i < 3; ++i)
      if (!(is >> c.t(i)))
        throw std::runtime_error("camera file parse error (t, camera " +
                                 std::to_string(ci) + "): " + path);
    if (!(is >> c.width >> c.height >> c.d_min >> c.d_max))
      throw std::runtime_error("camera file parse error (extents, camera " +
                               std::to_string(ci) + "): " + path);
    c.validate();
  }
  return cams;
}

}  // namespace pmrl::geom
