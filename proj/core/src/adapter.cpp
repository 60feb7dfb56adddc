#include "vndiff/adapter.hpp"

#include "vndiff/binary_io.hpp"
#include "vndiff/digest.hpp"
#include "vndiff/error.hpp"

namespace vndiff {

template <typename Real>
ControlAdapter<Real>::ControlAdapter(ScoreNetwork<Real>& base) : base_config_(base.config()) {
  if constexpr (std::is_same_v<Real, float>) base_digest_ = parameter_digest(base);
  input_copy_ = base.input_conv();
  encoder_copy_ = base.encoder();
  const int L = base_config_.levels;
  z_in_ = Conv3d<Real>::zeros(base_config_.base_channels, base_config_.base_channels, 1);
  z_out_ = Conv3d<Real>::zeros(base_config_.level_channels(L - 1), base_config_.level_channels(L - 1), 1);
  for (int l = 0; l < L; ++l) {
    z_skip_.push_back(Conv3d<Real>::zeros(base_config_.level_channels(l), base_config_.level_channels(l), 1));
  }
  base.set_frozen(true);
  visit_parameters([](const std::string&, Parameter<Real>& p) {
    p.requires_grad = true;
    p.grad = {};
  });
}

template <typename Real>
Var ControlAdapter<Real>::forward(Graph<Real>& g, ScoreNetwork<Real>& base, Var x_t, int t, Var y) {
  require_same_shape(g.value(x_t).shape(), g.value(y).shape(), "controlled_forward: x_t vs y");
  base.check_input(g.value(x_t).shape());
  if (!(base.config() == base_config_)) throw ShapeError("controlled_forward: adapter built for another architecture");

  Var temb = base.embed_time(g, t);
  Var hx = base.input_layer(g, x_t);
  EncoderTrace trunk = base.encode(g, hx, temb);

  Var m = g.add(z_in_(g, input_copy_(g, y)), hx);
  EncoderTrace branch = run_encoder(g, encoder_copy_, m, temb);

  Var controlled = g.add(z_out_(g, branch.bottom), trunk.bottom);
  std::vector<Var> skips;
  skips.reserve(trunk.skips.size());
  for (std::size_t l = 0; l < trunk.skips.size(); ++l) {
    skips.push_back(g.add(trunk.skips[l], z_skip_[l](g, branch.skips[l])));
  }
  return base.decode(g, controlled, skips, temb);
}

template <typename Real>
void ControlAdapter<Real>::visit_parameters(const ParamVisitor& f) {
  input_copy_.visit("input_copy", f);
  visit_encoder(encoder_copy_, "encoder_copy", f);
  z_in_.visit("z_in", f);
  z_out_.visit("z_out", f);
  for (std::size_t l = 0; l < z_skip_.size(); ++l) z_skip_[l].visit("z_skip." + std::to_string(l), f);
}

template <typename Real>
void ControlAdapter<Real>::for_each_parameter(const ConstParamVisitor& f) const {
  const_cast<ControlAdapter*>(this)->visit_parameters(
      [&f](const std::string& name, Parameter<Real>& p) { f(name, p); });
}

template <typename Real>
std::size_t ControlAdapter<Real>::parameter_count() const {
  std::size_t n = 0;
  for_each_parameter([&n](const std::string&, const Parameter<Real>& p) { n += p.value.size(); });
  return n;
}

template <typename Real>
void ControlAdapter<Real>::zero_grad() {
  visit_parameters([](const std::string&, Parameter<Real>& p) { p.zero_grad(); });
}

template class ControlAdapter<float>;
template class ControlAdapter<double>;

Tensor<float> predict_controlled(UNet& base, ControlAdapter<float>& adapter, const Tensor<float>& x_t, int t,
                                 const Tensor<float>& y) {
  Graph<float> g(GradMode::disabled);
  return g.take(adapter.forward(g, base, g.constant(x_t), t, g.constant(y)));
}

NamedParameters named_parameters(ControlAdapter<float>& adapter) {
  NamedParameters out;
  adapter.visit_parameters([&out](const std::string& n, Parameter<float>& p) { out.emplace_back(n, &p); });
  return out;
}

NamedParameters named_parameters(UNet& net) {
  NamedParameters out;
  net.visit_parameters([&out](const std::string& n, Parameter<float>& p) { out.emplace_back(n, &p); });
  return out;
}

double finetune_step(UNet& base, ControlAdapter<float>& adapter, const std::vector<PairedPatch>& batch,
                     const NoiseSchedule& sched, Adam& optimizer, Rng& rng) {
  if (!base.frozen()) throw ContractViolation("finetune_step: base network must be frozen");
  if (batch.empty()) throw ParameterError("finetune_step: empty batch");
  const auto params = named_parameters(adapter);
  zero_gradients(params);
  double total = 0.0;
  for (const auto& pair : batch) {
    const int t = rng.uniform_int(1, sched.steps());
    Tensor<float> eps = gaussian_like<float>(pair.x0.shape(), rng);
    ScoreFn<float> net = [&](Graph<float>& g, Var x_t, int timestep) {
      return adapter.forward(g, base, x_t, timestep, g.constant(pair.y));
    };
    total += training_loss(net, pair.x0, t, eps, sched);
  }
  scale_gradients(params, 1.0f / static_cast<float>(batch.size()));
  optimizer.step(params);
  return total / static_cast<double>(batch.size());
}

bool freeze_check(const UNet& base, const std::string& snapshot) {
  return parameter_digest(base) == snapshot;
}

std::string parameter_digest(const ControlAdapter<float>& adapter) {
  Sha256 h;
  adapter.for_each_parameter([&h](const std::string& name, const Parameter<float>& p) {
    std::vector<std::byte> buf;
    for (int d : p.value.shape().dims()) io::put_le<std::int32_t>(buf, d);
    io::put_floats_le(buf, p.value.values());
    h.update(name).update(buf);
  });
  return h.hex();
}

void save_adapter(const ControlAdapter<float>& adapter, const std::filesystem::path& path,
                  const TrainingState* state) {
  nlohmann::json manifest;
  manifest["format"] = "VNCKPT1";
  manifest["kind"] = "control_adapter";
  manifest["config"] = adapter.base_config();
  manifest["base_digest"] = adapter.base_digest();
  manifest["digest"] = parameter_digest(adapter);
  std::vector<NamedTensor> tensors;
  adapter.for_each_parameter([&tensors](const std::string& name, const Parameter<float>& p) {
    tensors.push_back({name, p.value.shape(), {p.value.values().begin(), p.value.values().end()}});
  });
  if (state) {
    manifest["step"] = state->step;
    manifest["optimizer_steps"] = state->optimizer.steps;
    auto opt = optimizer_tensors(state->optimizer);
    tensors.insert(tensors.end(), std::make_move_iterator(opt.begin()), std::make_move_iterator(opt.end()));
  }
  write_container(path, std::move(manifest), tensors);
}

ControlAdapter<float> load_adapter(const std::filesystem::path& path, const UNet& base, TrainingState* state) {
  Container c = read_container(path);
  if (c.manifest.value("kind", std::string()) != "control_adapter") {
    throw FormatError("checkpoint " + path.string() + " does not hold a control adapter");
  }
  const std::string expected = parameter_digest(base);
  if (c.manifest.value("base_digest", std::string()) != expected) {
    throw DigestMismatchError("adapter " + path.string() + " was cloned from a different base network");
  }
  UNet donor = base;
  ControlAdapter<float> adapter(donor);
  std::size_t i = 0;
  adapter.visit_parameters([&](const std::string& name, Parameter<float>& p) {
    if (i >= c.tensors.size() || c.tensors[i].name != name || c.tensors[i].shape != p.value.shape()) {
      throw TensorNameMismatchError("adapter checkpoint: expected tensor '" + name + "'");
    }
    p.value = Tensor<float>(c.tensors[i].shape, c.tensors[i].data);
    ++i;
  });
  if (state) {
    state->step = c.manifest.value("step", std::int64_t{0});
    state->optimizer = optimizer_from(c);
  }
  return adapter;
}

}  // namespace vndiff
