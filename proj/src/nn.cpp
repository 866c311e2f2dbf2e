#include "pmrl/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace pmrl::nn {

NodePtr linear(const NodePtr& w, const NodePtr& x, const NodePtr& b) {
  const std::size_t m = w->value.extent(0), n = w->value.extent(1);
  if (x->value.numel() != n || b->value.numel() != m)
    throw std::invalid_argument("linear: dimension mismatch");
  auto y = ad::reshape(ad::matmul(w, ad::reshape(x, {n, 1})), {m});
  return ad::add(y, b);
}

NodePtr gru_cell(const NodePtr& x, const NodePtr& h, const GruWeights& w) {
  auto xh = ad::concat({x, h});
  auto z = ad::sigmoid(linear(w.wz, xh, w.bz));
  auto r = ad::sigmoid(linear(w.wr, xh, w.br));
  auto xrh = ad::concat({x, ad::mul(r, h)});
  auto htil = ad::tanh_(linear(w.wh, xrh, w.bh));
  // h' = (1-z)*h + z*htil
  auto one_minus_z = ad::add_scalar(ad::neg(z), 1.0);
  return ad::add(ad::mul(one_minus_z, h), ad::mul(z, htil));
}

NodePtr Mlp::forward(const NodePtr& x) const {
  NodePtr h = x;
  for (std::size_t i = 0; i < ws.size(); ++i) {
    h = linear(ws[i], h, bs[i]);
    const bool last = (i + 1 == ws.size());
    if (!last)
      h = ad::leaky_relu(h);
    else if (sigmoid_out)
      h = ad::sigmoid(h);
  }
  return h;
}

NodePtr ParamStore::create(const std::string& name,
                           std::vector<std::size_t> shape,
                           std::mt19937_64& rng, double stddev) {
  Array v(shape);
  std::normal_distribution<double> dist(0.0, stddev);
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] = dist(rng);
  return create_from(name, std::move(v));
}

NodePtr ParamStore::create_zeros(const std::string& name,
                                 std::vector<std::size_t> shape) {
  return create_from(name, Array(std::move(shape)));
}

NodePtr ParamStore::create_from(const std::string& name, Array value) {
  if (params_.count(name))
    throw std::logic_error("ParamStore: duplicate parameter " + name);
  auto n = ad::param(std::move(value));
  params_[name] = n;
  m_[name] = Array(n->value.shape());
  v_[name] = Array(n->value.shape());
  return n;
}

NodePtr ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end())
    throw std::logic_error("ParamStore: unknown parameter " + name);
  return it->second;
}

void ParamStore::zero_grads() {
  for (auto& [name, p] : params_) p->zero_grad();
}

void ParamStore::ensure_grads() {
  for (auto& [name, p] : params_) p->ensure_grad();
}

void ParamStore::adam_step(double lr) {
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  for (auto& [name, p] : params_)
    if (p->grad.numel() != p->value.numel())
      throw std::logic_error("adam_step: missing gradient for " + name);
  ++step_;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step_));
  for (auto& [name, p] : params_) {
    Array& m = m_[name];
    Array& v = v_[name];
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      const double g = p->grad[i];
      m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g;
      v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p->value[i] -= lr * mhat / (std::sqrt(vhat) + kEps);
    }
  }
  zero_grads();
}

namespace {

constexpr char kMagic[4] = {'P', 'M', 'R', 'L'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}
void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), 8);
}
std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}

void write_record(std::ostream& os, const std::string& name, const Array& a) {
  write_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_u64(os, a.rank());
  for (auto e : a.shape()) write_u64(os, e);
  os.write(reinterpret_cast<const char*>(a.data()),
           static_cast<std::streamsize>(a.numel() * sizeof(double)));
}

}  // namespace

void ParamStore::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for write: " + path);
  os.write(kMagic, 4);
  write_u32(os, kVersion);
  for (const auto& [name, p] : params_) write_record(os, name, p->value);
  for (const auto& [name, a] : m_) write_record(os, name + ".m", a);
  for (const auto& [name, a] : v_) write_record(os, name + ".v", a);
  write_record(os, "adam.step", Array::scalar(static_cast<double>(step_)));
  if (!os) throw std::runtime_error("write failure on checkpoint: " + path);
}

void ParamStore::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("bad checkpoint magic in " + path);
  const std::uint32_t version = read_u32(is);
  if (version != kVersion)
    throw std::runtime_error("unsupported checkpoint version " +
                             std::to_string(version) + " in " + path);
  while (true) {
    const std::uint32_t name_len = read_u32(is);
    if (is.eof()) break;
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const std::uint64_t rank = read_u64(is);
    std::vector<std::size_t> shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(read_u64(is));
    Array a(shape);
    is.read(reinterpret_cast<char*>(a.data()),
            static_cast<std::streamsize>(a.numel() * sizeof(double)));
    if (!is) throw std::runtime_error("truncated checkpoint record '" + name +
                                      "' in " + path);
    if (name == "adam.step") {
      step_ = static_cast<std::uint64_t>(a[0]);
    } else if (name.size() > 2 && name.ends_with(".m")) {
      m_[name.substr(0, name.size() - 2)] = std::move(a);
    } else if (name.size() > 2 && name.ends_with(".v")) {
      v_[name.substr(0, name.size() - 2)] = std::move(a);
    } else {
      auto it = params_.find(name);
      if (it != params_.end())
        it->second->value = std::move(a);
      else
        create_from(name, std::move(a));
    }
  }
  for (const auto& [name, p] : params_) {
    if (!m_.count(name)) m_[name] = Array(p->value.shape());
    if (!v_.count(name)) v_[name] = Array(p->value.shape());
  }
}

}  // namespace pmrl::nn
