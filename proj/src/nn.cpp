#include "stamp/nn.hpp"

#include "stamp/errors.hpp"

#include <bit>

namespace stamp::nn {

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

void fnv_bytes(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
}

void fnv_u32(std::uint64_t& h, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  fnv_bytes(h, b, 4);
}

}  // namespace

Matrix round_to_float(Matrix m) {
  for (Eigen::Index i = 0; i < m.size(); ++i)
    m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
  return m;
}

Var ParameterSet::add(std::string name, Matrix value, bool decay) {
  if (find(name)) throw std::logic_error("duplicate parameter name: " + name);
  Var v = ad::leaf(round_to_float(std::move(value)));
  items_.push_back({std::move(name), v, decay});
  return v;
}

const Parameter* ParameterSet::find(std::string_view name) const {
  for (const auto& p : items_)
    if (p.name == name) return &p;
  return nullptr;
}

Parameter* ParameterSet::find(std::string_view name) {
  for (auto& p : items_)
    if (p.name == name) return &p;
  return nullptr;
}

bool ParameterSet::has_prefix(std::string_view prefix) const {
  for (const auto& p : items_)
    if (p.name.starts_with(prefix)) return true;
  return false;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += static_cast<std::size_t>(p.var.value().size());
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& p : items_) p.var.zero_grad();
}

std::uint64_t ParameterSet::digest(std::string_view prefix) const {
  std::uint64_t h = kFnvOffset;
  for (const auto& p : items_) {
    if (!p.name.starts_with(prefix)) continue;
    fnv_bytes(h, p.name.data(), p.name.size());
    fnv_u32(h, static_cast<std::uint32_t>(p.var.rows()));
    fnv_u32(h, static_cast<std::uint32_t>(p.var.cols()));
    const Matrix& m = p.var.value();
    for (Eigen::Index i = 0; i < m.size(); ++i)
      fnv_u32(h, std::bit_cast<std::uint32_t>(static_cast<float>(m.data()[i])));
  }
  return h;
}

Matrix truncated_normal(Eigen::Index rows, Eigen::Index cols, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double z = normal(rng);
    while (z < -2.0 || z > 2.0) z = normal(rng);
    m.data()[i] = sigma * z;
  }
  return m;
}

Linear Linear::create(ParameterSet& params, const std::string& name, int in, int out,
                      std::mt19937_64& rng) {
  Linear l;
  l.weight = params.add(name + ".weight", truncated_normal(in, out, 0.02, rng), true);
  l.bias = params.add(name + ".bias", Matrix::Zero(1, out), false);
  return l;
}

LayerNorm LayerNorm::create(ParameterSet& params, const std::string& name, int dim) {
  LayerNorm n;
  n.gain = params.add(name + ".gain", Matrix::Ones(1, dim), false);
  n.bias = params.add(name + ".bias", Matrix::Zero(1, dim), false);
  return n;
}

Mlp2 Mlp2::create(ParameterSet& params, const std::string& name, int in, int hidden, int out,
                  Activation act, std::mt19937_64& rng) {
  Mlp2 m;
  m.fc1 = Linear::create(params, name + ".fc1", in, hidden, rng);
  m.fc2 = Linear::create(params, name + ".fc2", hidden, out, rng);
  m.act = act;
  return m;
}

Var Mlp2::operator()(const Var& x) const {
  Var h = fc1(x);
  h = act == Activation::Gelu ? ad::gelu(h) : ad::silu(h);
  return fc2(h);
}

MultiHeadAttention MultiHeadAttention::create(ParameterSet& params, const std::string& name,
                                              int dim, int heads, std::mt19937_64& rng) {
  check(heads > 0 && dim % heads == 0, ErrorKind::Config,
        "attention width " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
  MultiHeadAttention a;
  a.q = Linear::create(params, name + ".q", dim, dim, rng);
  a.k = Linear::create(params, name + ".k", dim, dim, rng);
  a.v = Linear::create(params, name + ".v", dim, dim, rng);
  a.out = Linear::create(params, name + ".out", dim, dim, rng);
  a.heads = heads;
  return a;
}

Var MultiHeadAttention::operator()(const Var& queries, const Var& keys_values, int groups,
                                   std::vector<Matrix>* weights) const {
  Var attended = ad::attention(q(queries), k(keys_values), v(keys_values), heads, groups, weights);
  return out(attended);
}

}  // namespace stamp::nn
