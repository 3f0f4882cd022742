#include "metaictal/nets.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <random>

namespace metaictal::nets {

namespace fs = std::filesystem;
using nlohmann::json;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMap = Eigen::Map<const RowMat>;
using RowMap = Eigen::Map<RowMat>;
using ConstVecMap = Eigen::Map<const Vector>;
using VecMap = Eigen::Map<Vector>;

namespace {

constexpr double kNormEps = 1e-5;

ConstRowMap cmat(const ParamVector& p, std::size_t off, Eigen::Index rows, Eigen::Index cols) {
  return ConstRowMap(p.values().data() + off, rows, cols);
}
RowMap mmat(ParamVector& p, std::size_t off, Eigen::Index rows, Eigen::Index cols) {
  return RowMap(p.values().data() + off, rows, cols);
}
ConstVecMap cvec(const ParamVector& p, std::size_t off, Eigen::Index n) {
  return ConstVecMap(p.values().data() + off, n);
}
VecMap mvec(ParamVector& p, std::size_t off, Eigen::Index n) {
  return VecMap(p.values().data() + off, n);
}

Eigen::Index conv_out_len(Eigen::Index len, int kernel, int stride) {
  const int pad = kernel / 2;
  return (len + 2 * pad - kernel) / stride + 1;
}

// col rows are ordered tap-major: row j * cin + c holds x(c, o * stride + j - pad).
void im2col(const Matrix& x, int kernel, int stride, Eigen::Index lout, Matrix& col) {
  const Eigen::Index cin = x.rows();
  const Eigen::Index len = x.cols();
  const int pad = kernel / 2;
  col.setZero(kernel * cin, lout);
  for (Eigen::Index o = 0; o < lout; ++o) {
    for (int j = 0; j < kernel; ++j) {
      const Eigen::Index src = o * stride + j - pad;
      if (src >= 0 && src < len) col.block(j * cin, o, cin, 1) = x.col(src);
    }
  }
}

void col2im_add(const Matrix& dcol, int kernel, int stride, Matrix& dx) {
  const Eigen::Index cin = dx.rows();
  const Eigen::Index len = dx.cols();
  const int pad = kernel / 2;
  for (Eigen::Index o = 0; o < dcol.cols(); ++o) {
    for (int j = 0; j < kernel; ++j) {
      const Eigen::Index src = o * stride + j - pad;
      if (src >= 0 && src < len) dx.col(src) += dcol.block(j * cin, o, cin, 1);
    }
  }
}

struct NormCache {
  Matrix xhat;
  double rstd = 0.0;
};

Matrix layer_norm(const Matrix& h, const ConstVecMap& gain, const ConstVecMap& bias,
                  NormCache& cache) {
  const double n = static_cast<double>(h.size());
  const double mean = h.sum() / n;
  const double var = (h.array() - mean).square().sum() / n;
  cache.rstd = 1.0 / std::sqrt(var + kNormEps);
  cache.xhat = (h.array() - mean) * cache.rstd;
  Matrix y = gain.asDiagonal() * cache.xhat;
  y.colwise() += bias;
  return y;
}

Matrix layer_norm_back(const Matrix& dy, const NormCache& cache, const ConstVecMap& gain,
                       VecMap dgain, VecMap dbias) {
  dgain += (dy.array() * cache.xhat.array()).rowwise().sum().matrix();
  dbias += dy.rowwise().sum();
  const Matrix dxhat = gain.asDiagonal() * dy;
  const double n = static_cast<double>(dy.size());
  const double mean_d = dxhat.sum() / n;
  const double mean_dx = (dxhat.array() * cache.xhat.array()).sum() / n;
  return (cache.rstd * (dxhat.array() - mean_d - cache.xhat.array() * mean_dx)).matrix();
}

void fill_uniform(ParamVector& p, std::size_t off, std::size_t n, double bound,
                  std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (std::size_t i = 0; i < n; ++i) p[off + i] = u(rng);
}

}  // namespace

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void Model::check_input(const Matrix& input) const {
  if (input.rows() != input_rows() || input.cols() != input_cols()) {
    throw Error(Errc::shape_mismatch,
                "network expects input " + std::to_string(input_rows()) + "x" +
                    std::to_string(input_cols()) + ", got " + std::to_string(input.rows()) +
                    "x" + std::to_string(input.cols()));
  }
}

// ---------------------------------------------------------------------------
// ResNet1d

ResNet1d::ResNet1d(ResNetHyper hyper) : hyper_(std::move(hyper)) {
  if (hyper_.kernel < 1 || hyper_.kernel % 2 == 0) {
    throw Error(Errc::invalid_config, "resnet kernel must be odd and positive");
  }
  if (hyper_.widths.empty() || hyper_.widths.size() != hyper_.strides.size()) {
    throw Error(Errc::invalid_config, "resnet widths and strides must have equal, non-zero size");
  }
  if (hyper_.in_channels < 1 || hyper_.input_len < 1) {
    throw Error(Errc::invalid_config, "resnet input shape must be positive");
  }
  std::size_t off = 0;
  int in = hyper_.in_channels;
  const auto k = static_cast<std::size_t>(hyper_.kernel);
  for (std::size_t i = 0; i < hyper_.widths.size(); ++i) {
    Block b{};
    b.in_ch = in;
    b.out_ch = hyper_.widths[i];
    b.stride = hyper_.strides[i];
    if (b.out_ch < 1 || b.stride < 1) throw Error(Errc::invalid_config, "bad resnet block");
    b.project = b.in_ch != b.out_ch || b.stride != 1;
    const auto ci = static_cast<std::size_t>(b.in_ch);
    const auto co = static_cast<std::size_t>(b.out_ch);
    b.w1 = off; off += co * k * ci;
    b.b1 = off; off += co;
    b.g1 = off; off += co;
    b.be1 = off; off += co;
    b.w2 = off; off += co * k * co;
    b.b2 = off; off += co;
    b.g2 = off; off += co;
    b.be2 = off; off += co;
    if (b.project) {
      b.wp = off; off += co * ci;
      b.bp = off; off += co;
    }
    blocks_.push_back(b);
    in = b.out_ch;
  }
  head_w_ = off; off += static_cast<std::size_t>(in);
  head_b_ = off; off += 1;
  n_params_ = off;
}

std::vector<TensorSpec> ResNet1d::layout() const {
  std::vector<TensorSpec> out;
  const auto k = static_cast<std::size_t>(hyper_.kernel);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& b = blocks_[i];
    const auto ci = static_cast<std::size_t>(b.in_ch);
    const auto co = static_cast<std::size_t>(b.out_ch);
    const std::string p = "block" + std::to_string(i) + ".";
    out.push_back({p + "conv1.weight", {co, k, ci}});
    out.push_back({p + "conv1.bias", {co}});
    out.push_back({p + "norm1.gain", {co}});
    out.push_back({p + "norm1.bias", {co}});
    out.push_back({p + "conv2.weight", {co, k, co}});
    out.push_back({p + "conv2.bias", {co}});
    out.push_back({p + "norm2.gain", {co}});
    out.push_back({p + "norm2.bias", {co}});
    if (b.project) {
      out.push_back({p + "proj.weight", {co, 1, ci}});
      out.push_back({p + "proj.bias", {co}});
    }
  }
  out.push_back({"head.weight", {static_cast<std::size_t>(blocks_.back().out_ch)}});
  out.push_back({"head.bias", {1}});
  return out;
}

ParamVector ResNet1d::init(std::uint64_t seed) const {
  ParamVector p(layout());
  std::mt19937_64 rng(seed);
  const auto k = static_cast<std::size_t>(hyper_.kernel);
  for (const auto& b : blocks_) {
    const auto ci = static_cast<std::size_t>(b.in_ch);
    const auto co = static_cast<std::size_t>(b.out_ch);
    fill_uniform(p, b.w1, co * k * ci, 1.0 / std::sqrt(static_cast<double>(k * ci)), rng);
    fill_uniform(p, b.w2, co * k * co, 1.0 / std::sqrt(static_cast<double>(k * co)), rng);
    for (std::size_t c = 0; c < co; ++c) {
      p[b.g1 + c] = 1.0;
      p[b.g2 + c] = 1.0;
    }
    if (b.project) fill_uniform(p, b.wp, co * ci, 1.0 / std::sqrt(static_cast<double>(ci)), rng);
  }
  return p;
}

namespace {

struct BlockTape {
  Matrix col1;
  NormCache norm1;
  Matrix mask1;  // 1 where the first activation is positive
  Matrix col2;
  NormCache norm2;
  Matrix colp;   // strided input for the projection shortcut
  Matrix mask_out;
  Eigen::Index len_in = 0;
};

struct ResNetTape final : Tape {
  std::vector<BlockTape> blocks;
  Vector pooled;
  Eigen::Index last_len = 0;
};

}  // namespace

double ResNet1d::forward(const ParamVector& params, const Matrix& input,
                         std::unique_ptr<Tape>* tape) const {
  check_input(input);
  auto rt = std::make_unique<ResNetTape>();
  rt->blocks.resize(blocks_.size());
  const int k = hyper_.kernel;

  Matrix x = input;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& b = blocks_[i];
    auto& bt = rt->blocks[i];
    const Eigen::Index co = b.out_ch;
    const Eigen::Index lout = conv_out_len(x.cols(), k, b.stride);
    bt.len_in = x.cols();

    im2col(x, k, b.stride, lout, bt.col1);
    Matrix h1 = cmat(params, b.w1, co, k * b.in_ch) * bt.col1;
    h1.colwise() += cvec(params, b.b1, co);
    Matrix a1 = layer_norm(h1, cvec(params, b.g1, co), cvec(params, b.be1, co), bt.norm1);
    bt.mask1 = (a1.array() > 0.0).cast<double>();
    a1 = a1.cwiseMax(0.0);

    im2col(a1, k, 1, lout, bt.col2);
    Matrix h2 = cmat(params, b.w2, co, k * co) * bt.col2;
    h2.colwise() += cvec(params, b.b2, co);
    Matrix pre = layer_norm(h2, cvec(params, b.g2, co), cvec(params, b.be2, co), bt.norm2);

    if (b.project) {
      im2col(x, 1, b.stride, lout, bt.colp);
      pre += cmat(params, b.wp, co, b.in_ch) * bt.colp;
      pre.colwise() += cvec(params, b.bp, co);
    } else {
      pre += x;
    }
    bt.mask_out = (pre.array() > 0.0).cast<double>();
    x = pre.cwiseMax(0.0);
  }
  rt->last_len = x.cols();
  rt->pooled = x.rowwise().mean();
  const double logit =
      cvec(params, head_w_, rt->pooled.size()).dot(rt->pooled) + params[head_b_];
  if (tape) *tape = std::move(rt);
  return logit;
}

void ResNet1d::backward(const ParamVector& params, const Tape& tape, double dlogit,
                        ParamVector& grad) const {
  const auto& rt = dynamic_cast<const ResNetTape&>(tape);
  const int k = hyper_.kernel;
  const Eigen::Index c_last = rt.pooled.size();

  mvec(grad, head_w_, c_last) += dlogit * rt.pooled;
  grad[head_b_] += dlogit;
  const Vector dpooled = dlogit * cvec(params, head_w_, c_last);
  Matrix dx = (dpooled / static_cast<double>(rt.last_len)).replicate(1, rt.last_len);

  for (std::size_t ii = blocks_.size(); ii-- > 0;) {
    const auto& b = blocks_[ii];
    const auto& bt = rt.blocks[ii];
    const Eigen::Index co = b.out_ch;
    const Matrix dpre = dx.cwiseProduct(bt.mask_out);

    Matrix dxin = Matrix::Zero(b.in_ch, bt.len_in);
    if (b.project) {
      mmat(grad, b.wp, co, b.in_ch) += dpre * bt.colp.transpose();
      mvec(grad, b.bp, co) += dpre.rowwise().sum();
      const Matrix dcolp = cmat(params, b.wp, co, b.in_ch).transpose() * dpre;
      col2im_add(dcolp, 1, b.stride, dxin);
    } else {
      dxin += dpre;
    }

    const Matrix dh2 = layer_norm_back(dpre, bt.norm2, cvec(params, b.g2, co),
                                       mvec(grad, b.g2, co), mvec(grad, b.be2, co));
    mmat(grad, b.w2, co, k * co) += dh2 * bt.col2.transpose();
    mvec(grad, b.b2, co) += dh2.rowwise().sum();
    const Matrix dcol2 = cmat(params, b.w2, co, k * co).transpose() * dh2;
    Matrix da1 = Matrix::Zero(co, bt.col2.cols());
    col2im_add(dcol2, k, 1, da1);
    da1 = da1.cwiseProduct(bt.mask1);

    const Matrix dh1 = layer_norm_back(da1, bt.norm1, cvec(params, b.g1, co),
                                       mvec(grad, b.g1, co), mvec(grad, b.be1, co));
    mmat(grad, b.w1, co, k * b.in_ch) += dh1 * bt.col1.transpose();
    mvec(grad, b.b1, co) += dh1.rowwise().sum();
    const Matrix dcol1 = cmat(params, b.w1, co, k * b.in_ch).transpose() * dh1;
    col2im_add(dcol1, k, b.stride, dxin);
    dx = std::move(dxin);
  }
}

json ResNet1d::describe() const {
  return {{"type", "resnet1d"},
          {"in_channels", hyper_.in_channels},
          {"input_len", hyper_.input_len},
          {"widths", hyper_.widths},
          {"strides", hyper_.strides},
          {"kernel", hyper_.kernel}};
}

// ---------------------------------------------------------------------------
// LstmNet

LstmNet::LstmNet(LstmHyper hyper) : hyper_(hyper) {
  if (hyper_.in_features < 1 || hyper_.seq_len < 1 || hyper_.hidden < 1 || hyper_.frame < 1) {
    throw Error(Errc::invalid_config, "lstm sizes must be positive");
  }
  if (hyper_.seq_len % hyper_.frame != 0) {
    throw Error(Errc::invalid_config, "lstm sequence length must be a multiple of the frame");
  }
}

std::vector<TensorSpec> LstmNet::layout() const {
  const auto h = static_cast<std::size_t>(hyper_.hidden);
  const auto d = static_cast<std::size_t>(hyper_.in_features * hyper_.frame);
  return {{"lstm.w_input", {4 * h, d}},
          {"lstm.w_hidden", {4 * h, h}},
          {"lstm.bias", {4 * h}},
          {"head.weight", {h}},
          {"head.bias", {1}}};
}

ParamVector LstmNet::init(std::uint64_t seed) const {
  ParamVector p(layout());
  std::mt19937_64 rng(seed);
  const auto h = static_cast<std::size_t>(hyper_.hidden);
  const auto d = static_cast<std::size_t>(hyper_.in_features * hyper_.frame);
  const double bound = 1.0 / std::sqrt(static_cast<double>(d + h));
  fill_uniform(p, 0, 4 * h * d, bound, rng);
  fill_uniform(p, 4 * h * d, 4 * h * h, bound, rng);
  return p;
}

namespace {

struct LstmTape final : Tape {
  Matrix inputs;  // framed input [d x steps]
  Matrix gates;   // [4h x steps], activated (i, f, g, o)
  Matrix cells;   // [h x steps + 1], column 0 is the zero initial state
  Matrix hiddens; // [h x steps + 1]
  Matrix tanh_c;  // [h x steps]
};

}  // namespace

double LstmNet::forward(const ParamVector& params, const Matrix& input,
                        std::unique_ptr<Tape>* tape) const {
  check_input(input);
  const Eigen::Index h = hyper_.hidden;
  const Eigen::Index d = static_cast<Eigen::Index>(hyper_.in_features) * hyper_.frame;
  const Eigen::Index steps = hyper_.seq_len / hyper_.frame;

  auto lt = std::make_unique<LstmTape>();
  // Column-major storage makes each frame of consecutive samples contiguous.
  lt->inputs = Eigen::Map<const Matrix>(input.data(), d, steps);
  const auto w_in = cmat(params, 0, 4 * h, d);
  const auto w_hid = cmat(params, static_cast<std::size_t>(4 * h * d), 4 * h, h);
  const auto bias = cvec(params, static_cast<std::size_t>(4 * h * (d + h)), 4 * h);
  const std::size_t head = static_cast<std::size_t>(4 * h * (d + h + 1));

  lt->gates = w_in * lt->inputs;
  lt->gates.colwise() += bias;
  lt->cells.setZero(h, steps + 1);
  lt->hiddens.setZero(h, steps + 1);
  lt->tanh_c.resize(h, steps);
  for (Eigen::Index t = 0; t < steps; ++t) {
    auto a = lt->gates.col(t);
    a.noalias() += w_hid * lt->hiddens.col(t);
    for (Eigen::Index j = 0; j < h; ++j) {
      a(j) = sigmoid(a(j));
      a(h + j) = sigmoid(a(h + j));
      a(2 * h + j) = std::tanh(a(2 * h + j));
      a(3 * h + j) = sigmoid(a(3 * h + j));
    }
    lt->cells.col(t + 1) = a.segment(h, h).cwiseProduct(lt->cells.col(t)) +
                           a.segment(0, h).cwiseProduct(a.segment(2 * h, h));
    lt->tanh_c.col(t) = lt->cells.col(t + 1).array().tanh();
    lt->hiddens.col(t + 1) = a.segment(3 * h, h).cwiseProduct(lt->tanh_c.col(t));
  }
  const double logit = cvec(params, head, h).dot(lt->hiddens.col(steps)) + params[head + h];
  if (tape) *tape = std::move(lt);
  return logit;
}

void LstmNet::backward(const ParamVector& params, const Tape& tape, double dlogit,
                       ParamVector& grad) const {
  const auto& lt = dynamic_cast<const LstmTape&>(tape);
  const Eigen::Index h = hyper_.hidden;
  const Eigen::Index d = static_cast<Eigen::Index>(hyper_.in_features) * hyper_.frame;
  const Eigen::Index steps = lt.inputs.cols();
  const auto w_hid_off = static_cast<std::size_t>(4 * h * d);
  const auto bias_off = static_cast<std::size_t>(4 * h * (d + h));
  const auto head = static_cast<std::size_t>(4 * h * (d + h + 1));
  const auto w_hid = cmat(params, w_hid_off, 4 * h, h);

  mvec(grad, head, h) += dlogit * lt.hiddens.col(steps);
  grad[head + h] += dlogit;

  Vector dh = dlogit * cvec(params, head, h);
  Vector dc = Vector::Zero(h);
  Matrix da(4 * h, steps);
  for (Eigen::Index t = steps; t-- > 0;) {
    const auto a = lt.gates.col(t);
    const auto i = a.segment(0, h).array();
    const auto f = a.segment(h, h).array();
    const auto g = a.segment(2 * h, h).array();
    const auto o = a.segment(3 * h, h).array();
    const auto tc = lt.tanh_c.col(t).array();
    const Eigen::ArrayXd dct = dc.array() + dh.array() * o * (1.0 - tc.square());
    da.col(t).segment(0, h) = (dct * g * i * (1.0 - i)).matrix();
    da.col(t).segment(h, h) = (dct * lt.cells.col(t).array() * f * (1.0 - f)).matrix();
    da.col(t).segment(2 * h, h) = (dct * i * (1.0 - g.square())).matrix();
    da.col(t).segment(3 * h, h) = (dh.array() * tc * o * (1.0 - o)).matrix();
    dc = (dct * f).matrix();
    dh.noalias() = w_hid.transpose() * da.col(t);
  }
  mmat(grad, 0, 4 * h, d) += da * lt.inputs.transpose();
  mmat(grad, w_hid_off, 4 * h, h) += da * lt.hiddens.leftCols(steps).transpose();
  mvec(grad, bias_off, 4 * h) += da.rowwise().sum();
}

json LstmNet::describe() const {
  return {{"type", "lstm"},
          {"in_features", hyper_.in_features},
          {"seq_len", hyper_.seq_len},
          {"hidden", hyper_.hidden},
          {"frame", hyper_.frame}};
}

std::shared_ptr<const Model> make_model(const json& d) {
  try {
    const auto type = d.at("type").get<std::string>();
    if (type == "resnet1d") {
      ResNetHyper h;
      h.in_channels = d.at("in_channels").get<int>();
      h.input_len = d.at("input_len").get<int>();
      h.widths = d.at("widths").get<std::vector<int>>();
      h.strides = d.at("strides").get<std::vector<int>>();
      h.kernel = d.at("kernel").get<int>();
      return std::make_shared<ResNet1d>(h);
    }
    if (type == "lstm") {
      LstmHyper h;
      h.in_features = d.at("in_features").get<int>();
      h.seq_len = d.at("seq_len").get<int>();
      h.hidden = d.at("hidden").get<int>();
      h.frame = d.at("frame").get<int>();
      return std::make_shared<LstmNet>(h);
    }
    throw Error(Errc::format_error, "unknown model type '" + type + "'");
  } catch (const json::exception& e) {
    throw Error(Errc::format_error, std::string("bad architecture description: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Main and meta networks

std::string to_string(MainArch arch) { return arch == MainArch::lstm ? "lstm" : "resnet1d"; }

MainArch main_arch_from_string(const std::string& s) {
  if (s == "lstm") return MainArch::lstm;
  if (s == "resnet1d" || s == "resnet") return MainArch::resnet1d;
  throw Error(Errc::invalid_config, "unknown architecture '" + s + "'");
}

double MainNetwork::logit(const Matrix& x) const { return model->forward(params, x, nullptr); }

double MainNetwork::forward(const Matrix& x) const { return sigmoid(logit(x)); }

std::vector<double> MainNetwork::forward_batch(std::span<const Matrix* const> xs) const {
  std::vector<double> out;
  out.reserve(xs.size());
  for (const Matrix* x : xs) out.push_back(forward(*x));
  return out;
}

MainNetwork make_resnet_main(const ResNetHyper& hyper, std::uint64_t seed) {
  MainNetwork net;
  net.arch = MainArch::resnet1d;
  net.model = std::make_shared<ResNet1d>(hyper);
  net.params = net.model->init(seed);
  return net;
}

MainNetwork make_lstm_main(const LstmHyper& hyper, std::uint64_t seed) {
  MainNetwork net;
  net.arch = MainArch::lstm;
  net.model = std::make_shared<LstmNet>(hyper);
  net.params = net.model->init(seed);
  return net;
}

Matrix MetaNetwork::join(const Matrix& x, const Matrix& y) const {
  if (x.cols() != x_cols || y.cols() != y_cols || x.rows() != y.rows()) {
    throw Error(Errc::shape_mismatch, "meta network expects history " + std::to_string(x_cols) +
                                          " and horizon " + std::to_string(y_cols) + " columns");
  }
  Matrix joined(x.rows() + 1, x_cols + y_cols);
  joined.topLeftCorner(x.rows(), x_cols) = x;
  joined.topRightCorner(y.rows(), y_cols) = y;
  joined.bottomLeftCorner(1, x_cols).setZero();
  joined.bottomRightCorner(1, y_cols).setOnes();
  return joined;
}

double MetaNetwork::logit(const Matrix& x, const Matrix& y) const {
  return model->forward(params, join(x, y), nullptr);
}

double MetaNetwork::forward(const Matrix& x, const Matrix& y) const {
  return sigmoid(logit(x, y));
}

MetaNetwork make_meta(int n_channels, Eigen::Index x_cols, Eigen::Index y_cols, int hidden,
                      int frame, std::uint64_t seed) {
  LstmHyper h;
  h.in_features = n_channels + 1;
  h.seq_len = static_cast<int>(x_cols + y_cols);
  h.hidden = hidden;
  h.frame = frame;
  MetaNetwork net;
  net.model = std::make_shared<LstmNet>(h);
  net.params = net.model->init(seed);
  net.x_cols = x_cols;
  net.y_cols = y_cols;
  return net;
}

// ---------------------------------------------------------------------------
// Loss

double bce_loss(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size() || pred.empty()) {
    throw Error(Errc::shape_mismatch, "bce_loss needs equally sized, non-empty inputs");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (std::isnan(pred[i]) || std::isnan(target[i])) {
      throw Error(Errc::non_finite, "bce_loss input contains NaN");
    }
    const double p = std::clamp(pred[i], kProbEps, 1.0 - kProbEps);
    const double t = target[i];
    sum += t * std::log(p) + (1.0 - t) * std::log1p(-p);
  }
  return -sum / static_cast<double>(pred.size());
}

double bce_logit_grad(double prob, double target, std::size_t n) {
  if (prob < kProbEps || prob > 1.0 - kProbEps) return 0.0;
  return (prob - target) / static_cast<double>(n);
}

double MainBatchLoss::operator()(const ParamVector& params, ParamVector* grad) const {
  if (xs.size() != targets.size()) throw Error(Errc::shape_mismatch, "batch/target size differ");
  std::vector<double> preds(xs.size());
  const auto n = xs.size();
  for (std::size_t i = 0; i < n; ++i) {
    std::unique_ptr<Tape> tape;
    preds[i] = sigmoid(net->model->forward(params, *xs[i], grad ? &tape : nullptr));
    if (grad) {
      const double d = bce_logit_grad(preds[i], targets[i], n);
      if (d != 0.0) net->model->backward(params, *tape, d, *grad);
    }
  }
  return bce_loss(preds, targets);
}

double MetaTargetLoss::operator()(const ParamVector& params, ParamVector* grad) const {
  const auto n = xs.size();
  if (ys.size() != n || preds.size() != n) throw Error(Errc::shape_mismatch, "batch sizes differ");
  std::vector<double> targets(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::unique_ptr<Tape> tape;
    const double t = sigmoid(net->model->forward(params, net->join(*xs[i], *ys[i]),
                                                 grad ? &tape : nullptr));
    targets[i] = t;
    if (grad) {
      const double p = std::clamp(preds[i], kProbEps, 1.0 - kProbEps);
      const double dloss_dt = (std::log1p(-p) - std::log(p)) / static_cast<double>(n);
      net->model->backward(params, *tape, dloss_dt * t * (1.0 - t), *grad);
    }
  }
  return bce_loss(preds, targets);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'M', 'I', 'C', 'K', 'P', 'T', '0', '1'};

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

json read_json(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(Errc::missing_checkpoint, "missing " + file.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(Errc::format_error, file.string() + ": " + e.what());
  }
}

}  // namespace

void save_params(const ParamVector& params, const fs::path& file) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  json layout = json::array();
  for (const auto& t : params.layout()) layout.push_back({{"name", t.name}, {"shape", t.shape}});
  const std::string header = json{{"layout", layout}, {"count", params.size()}}.dump();
  std::ofstream out(file, std::ios::binary);
  if (!out) throw Error(Errc::io_error, "cannot write " + file.string());
  out.write(kMagic, sizeof(kMagic));
  put_u64(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (double v : params.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  if (!out) throw Error(Errc::io_error, "write failed for " + file.string());
}

ParamVector load_params(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error(Errc::missing_checkpoint, "missing " + file.string());
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (blob.size() < 16 || !std::equal(kMagic, kMagic + 8, blob.begin())) {
    throw Error(Errc::format_error, file.string() + " is not a parameter checkpoint");
  }
  const auto header_len = get_u64(blob.data() + 8);
  if (16 + header_len > blob.size()) throw Error(Errc::format_error, "truncated header");
  json header;
  std::vector<TensorSpec> layout;
  std::size_t count = 0;
  try {
    header = json::parse(blob.begin() + 16, blob.begin() + 16 + static_cast<long>(header_len));
    for (const auto& t : header.at("layout")) {
      layout.push_back({t.at("name").get<std::string>(),
                        t.at("shape").get<std::vector<std::size_t>>()});
    }
    count = header.at("count").get<std::size_t>();
  } catch (const json::exception& e) {
    throw Error(Errc::format_error, std::string("bad checkpoint header: ") + e.what());
  }
  const std::size_t payload = 16 + header_len;
  if (blob.size() != payload + 8 * count) {
    throw Error(Errc::format_error, file.string() + " payload size mismatch");
  }
  std::vector<double> values(count);
  for (std::size_t i = 0; i < count; ++i) {
    values[i] = std::bit_cast<double>(get_u64(blob.data() + payload + 8 * i));
  }
  return ParamVector(std::move(layout), std::move(values));
}

void save_main(const MainNetwork& net, const fs::path& dir) {
  fs::create_directories(dir);
  save_params(net.params, dir / "params.bin");
  json arch = {{"role", "main"}, {"arch", to_string(net.arch)}, {"model", net.model->describe()}};
  std::ofstream(dir / "arch.json") << arch.dump(2) << '\n';
}

MainNetwork load_main(const fs::path& dir) {
  const json arch = read_json(dir / "arch.json");
  MainNetwork net;
  try {
    net.arch = main_arch_from_string(arch.at("arch").get<std::string>());
    net.model = make_model(arch.at("model"));
  } catch (const json::exception& e) {
    throw Error(Errc::format_error, std::string("bad arch.json: ") + e.what());
  }
  net.params = load_params(dir / "params.bin");
  if (net.params.layout() != net.model->layout()) {
    throw Error(Errc::format_error, "checkpoint layout does not match " + dir.string());
  }
  return net;
}

void save_meta(const MetaNetwork& net, const fs::path& dir) {
  fs::create_directories(dir);
  save_params(net.params, dir / "params.bin");
  json arch = {{"role", "meta"},
               {"x_cols", net.x_cols},
               {"y_cols", net.y_cols},
               {"model", net.model->describe()}};
  std::ofstream(dir / "arch.json") << arch.dump(2) << '\n';
}

MetaNetwork load_meta(const fs::path& dir) {
  const json arch = read_json(dir / "arch.json");
  MetaNetwork net;
  try {
    net.x_cols = arch.at("x_cols").get<Eigen::Index>();
    net.y_cols = arch.at("y_cols").get<Eigen::Index>();
    net.model = make_model(arch.at("model"));
  } catch (const json::exception& e) {
    throw Error(Errc::format_error, std::string("bad arch.json: ") + e.what());
  }
  net.params = load_params(dir / "params.bin");
  if (net.params.layout() != net.model->layout()) {
    throw Error(Errc::format_error, "checkpoint layout does not match " + dir.string());
  }
  return net;
}

}  // namespace metaictal::nets
