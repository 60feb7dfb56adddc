#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "vndiff/checkpoint.hpp"
#include "vndiff/diffusion.hpp"
#include "vndiff/optim.hpp"
#include "vndiff/unet.hpp"

namespace vndiff {

// Trainable branch grafted onto a frozen ScoreNetwork.
//
// Holds clones of the base input layer (F_I) and encoder (F_E) plus 1x1x1
// zero-initialised junctions:
//   z_in            adds the copy input features of y to F_I(x_t)
//   z_out           adds the copy bottom features to f_t
//   z_skip[level]   adds the copy level output to the decoder skip input
// The middle block and the decoder are not cloned.
template <typename Real>
class ControlAdapter {
 public:
  using ParamVisitor = typename ScoreNetwork<Real>::ParamVisitor;
  using ConstParamVisitor = typename ScoreNetwork<Real>::ConstParamVisitor;

  ControlAdapter() = default;

  // Clones the base trunk; freezes `base`.
  explicit ControlAdapter(ScoreNetwork<Real>& base);

  // eps prediction of the base network steered by condition y.
  Var forward(Graph<Real>& g, ScoreNetwork<Real>& base, Var x_t, int t, Var y);

  // Parameter digest of the base the adapter was cloned from.
  const std::string& base_digest() const { return base_digest_; }
  const UNetConfig& base_config() const { return base_config_; }

  void visit_parameters(const ParamVisitor& f);
  void for_each_parameter(const ConstParamVisitor& f) const;
  std::size_t parameter_count() const;
  void zero_grad();

  Conv3d<Real>& input_copy() { return input_copy_; }
  std::vector<EncoderLevel<Real>>& encoder_copy() { return encoder_copy_; }
  Conv3d<Real>& z_in() { return z_in_; }
  Conv3d<Real>& z_out() { return z_out_; }
  std::vector<Conv3d<Real>>& z_skip() { return z_skip_; }

  template <typename To>
  ControlAdapter<To> cast() const;

 private:
  template <typename>
  friend class ControlAdapter;

  UNetConfig base_config_;
  std::string base_digest_;
  Conv3d<Real> input_copy_;
  std::vector<EncoderLevel<Real>> encoder_copy_;
  Conv3d<Real> z_in_;
  Conv3d<Real> z_out_;
  std::vector<Conv3d<Real>> z_skip_;
};

template <typename Real>
ControlAdapter<Real> init_adapter(ScoreNetwork<Real>& base) {
  return ControlAdapter<Real>(base);
}

template <typename Real>
Var controlled_forward(Graph<Real>& g, ScoreNetwork<Real>& base, ControlAdapter<Real>& adapter, Var x_t,
                       int t, Var y) {
  return adapter.forward(g, base, x_t, t, y);
}

// Gradient-free controlled prediction on [1, D, H, W] tensors.
Tensor<float> predict_controlled(UNet& base, ControlAdapter<float>& adapter, const Tensor<float>& x_t, int t,
                                 const Tensor<float>& y);

struct PairedPatch {
  Tensor<float> x0;  // clean target, normalised
  Tensor<float> y;   // low-dose condition, normalised
};

// One Adam step of the epsilon objective on adapter parameters only.
// Draws one uniform t in [1, T] and fresh noise per batch entry from `rng`.
// Throws ContractViolation when `base` is not frozen.
double finetune_step(UNet& base, ControlAdapter<float>& adapter, const std::vector<PairedPatch>& batch,
                     const NoiseSchedule& sched, Adam& optimizer, Rng& rng);

NamedParameters named_parameters(ControlAdapter<float>& adapter);
NamedParameters named_parameters(UNet& net);

// True iff every base parameter still hashes to `snapshot`.
bool freeze_check(const UNet& base, const std::string& snapshot);

std::string parameter_digest(const ControlAdapter<float>& adapter);

void save_adapter(const ControlAdapter<float>& adapter, const std::filesystem::path& path,
                  const TrainingState* state = nullptr);
// Rejects a checkpoint cloned from a different base with DigestMismatchError.
ControlAdapter<float> load_adapter(const std::filesystem::path& path, const UNet& base,
                                   TrainingState* state = nullptr);

template <typename Real>
template <typename To>
ControlAdapter<To> ControlAdapter<Real>::cast() const {
  ControlAdapter<To> out;
  out.base_config_ = base_config_;
  out.base_digest_ = base_digest_;
  auto conv = [](const Conv3d<Real>& c) {
    Conv3d<To> o;
    o.weight.value = c.weight.value.template cast<To>();
    o.bias.value = c.bias.value.template cast<To>();
    o.stride = c.stride;
    return o;
  };
  // Recreate the encoder copy from a cast base so block layout matches.
  ScoreNetwork<To> shape_donor(base_config_, 0);
  out.encoder_copy_ = shape_donor.encoder();
  out.input_copy_ = conv(input_copy_);
  out.z_in_ = conv(z_in_);
  out.z_out_ = conv(z_out_);
  for (const auto& z : z_skip_) out.z_skip_.push_back(conv(z));
  std::vector<const Parameter<Real>*> src;
  for_each_parameter([&](const std::string&, const Parameter<Real>& p) { src.push_back(&p); });
  std::size_t i = 0;
  out.visit_parameters([&](const std::string&, Parameter<To>& p) {
    p.value = src[i++]->value.template cast<To>();
    p.requires_grad = true;
  });
  return out;
}

extern template class ControlAdapter<float>;
extern template class ControlAdapter<double>;

}  // namespace vndiff
