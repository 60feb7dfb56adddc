#include "vndiff/training.hpp"

#include <algorithm>

#include "vndiff/error.hpp"
#include "vndiff/patches.hpp"

namespace vndiff {

std::array<int, 3> random_origin(std::array<int, 3> dims, int edge, Rng& rng) {
  std::array<int, 3> o{};
  for (int a = 0; a < 3; ++a) {
    if (edge > dims[a]) throw ParameterError("crop edge exceeds volume dims");
    o[a] = rng.uniform_int(0, dims[a] - edge);
  }
  return o;
}

std::vector<Tensor<float>> sample_crops(const std::vector<Volume>& volumes, int edge, int batch, Rng& rng) {
  if (volumes.empty()) throw DataError("no training volumes");
  std::vector<Tensor<float>> out;
  out.reserve(batch);
  for (int i = 0; i < batch; ++i) {
    const Volume& v = volumes[rng.uniform_int(0, static_cast<int>(volumes.size()) - 1)];
    out.push_back(extract_patch(v, random_origin(v.dims, edge, rng), edge));
  }
  return out;
}

std::vector<PairedPatch> sample_paired_crops(const std::vector<PairedVolume>& pairs, int edge, int batch,
                                             Rng& rng) {
  if (pairs.empty()) throw DataError("no training pairs");
  std::vector<PairedPatch> out;
  out.reserve(batch);
  for (int i = 0; i < batch; ++i) {
    const PairedVolume& p = pairs[rng.uniform_int(0, static_cast<int>(pairs.size()) - 1)];
    const auto o = random_origin(p.x0.dims, edge, rng);
    out.push_back({extract_patch(p.x0, o, edge), extract_patch(p.y, o, edge)});
  }
  return out;
}

Tensor<float> concat_channels(const Tensor<float>& a, const Tensor<float>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.rank() != 4 || sb.rank() != 4 || sa[1] != sb[1] || sa[2] != sb[2] || sa[3] != sb[3])
    throw ShapeError("concat_channels: spatial extents differ (" + sa.str() + " vs " + sb.str() + ")");
  std::vector<float> data(a.values().begin(), a.values().end());
  data.insert(data.end(), b.values().begin(), b.values().end());
  return Tensor<float>(Shape{sa[0] + sb[0], sa[1], sa[2], sa[3]}, std::move(data));
}

namespace {

double averaged_step(UNet& net, Adam& optimizer, std::size_t batch, const std::function<double(std::size_t)>& one) {
  if (batch == 0) throw ParameterError("empty batch");
  const auto params = named_parameters(net);
  zero_gradients(params);
  double total = 0.0;
  for (std::size_t i = 0; i < batch; ++i) total += one(i);
  scale_gradients(params, 1.0f / static_cast<float>(batch));
  optimizer.step(params);
  return total / static_cast<double>(batch);
}

}  // namespace

double pretrain_step(UNet& net, const std::vector<Tensor<float>>& batch, const NoiseSchedule& sched,
                     Adam& optimizer, Rng& rng) {
  if (net.config().in_channels != 1) throw ParameterError("pretrain_step expects a single-channel network");
  ScoreFn<float> fn = [&net](Graph<float>& g, Var x_t, int t) { return net.forward(g, x_t, t).eps; };
  return averaged_step(net, optimizer, batch.size(), [&](std::size_t i) {
    const int t = rng.uniform_int(1, sched.steps());
    Tensor<float> eps = gaussian_like<float>(batch[i].shape(), rng);
    return training_loss(fn, batch[i], t, eps, sched);
  });
}

double conditional_step(UNet& net, const std::vector<PairedPatch>& batch, const NoiseSchedule& sched,
                        Adam& optimizer, Rng& rng) {
  if (net.config().in_channels != 2) throw ParameterError("conditional_step expects in_channels = 2");
  return averaged_step(net, optimizer, batch.size(), [&](std::size_t i) {
    const int t = rng.uniform_int(1, sched.steps());
    Tensor<float> eps = gaussian_like<float>(batch[i].x0.shape(), rng);
    ScoreFn<float> fn = [&](Graph<float>& g, Var x_t, int timestep) {
      return net.forward(g, g.concat_channels(x_t, g.constant(batch[i].y)), timestep).eps;
    };
    return training_loss(fn, batch[i].x0, t, eps, sched);
  });
}

double regression_step(UNet& net, const std::vector<PairedPatch>& batch, Adam& optimizer) {
  if (net.config().in_channels != 1) throw ParameterError("regression_step expects a single-channel network");
  return averaged_step(net, optimizer, batch.size(), [&](std::size_t i) {
    Graph<float> g;
    Var pred = net.forward(g, g.constant(batch[i].y), 0).eps;
    Var loss = g.mse(pred, batch[i].x0);
    g.backward(loss);
    return static_cast<double>(g.value(loss)[0]);
  });
}

}  // namespace vndiff
