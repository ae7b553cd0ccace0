#include "logitshift/network.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>

namespace logitshift {

namespace {

template <class... Ts>
struct overloaded : Ts...
{
    using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

std::invalid_argument layer_error(const std::string& layer, const std::string& what)
{
    return std::invalid_argument("layer '" + layer + "': " + what);
}

Shape infer_output_shape(const Layer& layer, const Shape& in)
{
    return std::visit(
        overloaded{
            [&](const Conv2D& conv) -> Shape {
                if (in.size() != 3) throw layer_error(layer.name, "Conv2D expects a rank-3 input, got " + to_string(in));
                const auto& w = conv.weights.shape();
                if (w.size() != 4 || w[3] != in[2]) {
                    throw layer_error(layer.name, "Conv2D weights " + to_string(w) + " incompatible with input " +
                                                      to_string(in));
                }
                if (conv.bias.shape() != Shape{w[0]}) {
                    throw layer_error(layer.name, "Conv2D bias " + to_string(conv.bias.shape()) + " does not match " +
                                                      std::to_string(w[0]) + " output channels");
                }
                if (conv.stride == 0) throw layer_error(layer.name, "stride must be positive");
                const std::size_t h = in[0] + 2 * conv.padding;
                const std::size_t wd = in[1] + 2 * conv.padding;
                if (h < w[1] || wd < w[2]) throw layer_error(layer.name, "kernel larger than padded input");
                return {(h - w[1]) / conv.stride + 1, (wd - w[2]) / conv.stride + 1, w[0]};
            },
            [&](const ReLU&) -> Shape { return in; },
            [&](const MaxPool& pool) -> Shape {
                if (in.size() != 3) throw layer_error(layer.name, "MaxPool expects a rank-3 input, got " + to_string(in));
                if (pool.stride == 0 || pool.window_h == 0 || pool.window_w == 0) {
                    throw layer_error(layer.name, "window and stride must be positive");
                }
                if (pool.window_h > in[0] || pool.window_w > in[1]) {
                    throw layer_error(layer.name, "window larger than input " + to_string(in));
                }
                return {(in[0] - pool.window_h) / pool.stride + 1, (in[1] - pool.window_w) / pool.stride + 1, in[2]};
            },
            [&](const Flatten&) -> Shape { return {element_count(in)}; },
            [&](const Dense& dense) -> Shape {
                if (in.size() != 1) throw layer_error(layer.name, "Dense expects a rank-1 input, got " + to_string(in));
                const auto& w = dense.weights.shape();
                if (w.size() != 2 || w[1] != in[0]) {
                    throw layer_error(layer.name, "Dense weights " + to_string(w) + " incompatible with input " +
                                                      to_string(in));
                }
                if (dense.bias.shape() != Shape{w[0]}) {
                    throw layer_error(layer.name, "Dense bias " + to_string(dense.bias.shape()) + " does not match " +
                                                      std::to_string(w[0]) + " outputs");
                }
                return {w[0]};
            },
        },
        layer.kind);
}

Tensor conv_forward(const Conv2D& conv, const Tensor& in, const Shape& out_shape)
{
    const auto& ws = conv.weights.shape();
    const std::size_t kh = ws[1], kw = ws[2], ch = ws[3];
    const auto pad = static_cast<std::ptrdiff_t>(conv.padding);
    const auto in_h = static_cast<std::ptrdiff_t>(in.dim(0));
    const auto in_w = static_cast<std::ptrdiff_t>(in.dim(1));
    Tensor out(out_shape);
    const auto w = conv.weights.data();
    for (std::size_t oi = 0; oi < out_shape[0]; ++oi) {
        for (std::size_t oj = 0; oj < out_shape[1]; ++oj) {
            double* o = out.cell(oi, oj);
            for (std::size_t oc = 0; oc < out_shape[2]; ++oc) o[oc] = conv.bias[oc];
            for (std::size_t u = 0; u < kh; ++u) {
                const auto ii = static_cast<std::ptrdiff_t>(oi * conv.stride + u) - pad;
                if (ii < 0 || ii >= in_h) continue;
                for (std::size_t v = 0; v < kw; ++v) {
                    const auto jj = static_cast<std::ptrdiff_t>(oj * conv.stride + v) - pad;
                    if (jj < 0 || jj >= in_w) continue;
                    const double* x = in.cell(static_cast<std::size_t>(ii), static_cast<std::size_t>(jj));
                    for (std::size_t oc = 0; oc < out_shape[2]; ++oc) {
                        const double* wk = &w[((oc * kh + u) * kw + v) * ch];
                        double acc = 0.0;
                        for (std::size_t c = 0; c < ch; ++c) acc += wk[c] * x[c];
                        o[oc] += acc;
                    }
                }
            }
        }
    }
    return out;
}

void conv_backward(const Conv2D& conv, const Tensor& in, const Tensor& gout, Tensor& gin, ParameterGradient& pg)
{
    const auto& ws = conv.weights.shape();
    const std::size_t kh = ws[1], kw = ws[2], ch = ws[3];
    const auto pad = static_cast<std::ptrdiff_t>(conv.padding);
    const auto in_h = static_cast<std::ptrdiff_t>(in.dim(0));
    const auto in_w = static_cast<std::ptrdiff_t>(in.dim(1));
    const auto& os = gout.shape();
    const auto w = conv.weights.data();
    auto gw = pg.weights.data();
    for (std::size_t oi = 0; oi < os[0]; ++oi) {
        for (std::size_t oj = 0; oj < os[1]; ++oj) {
            const double* g = gout.cell(oi, oj);
            for (std::size_t oc = 0; oc < os[2]; ++oc) pg.bias[oc] += g[oc];
            for (std::size_t u = 0; u < kh; ++u) {
                const auto ii = static_cast<std::ptrdiff_t>(oi * conv.stride + u) - pad;
                if (ii < 0 || ii >= in_h) continue;
                for (std::size_t v = 0; v < kw; ++v) {
                    const auto jj = static_cast<std::ptrdiff_t>(oj * conv.stride + v) - pad;
                    if (jj < 0 || jj >= in_w) continue;
                    const auto si = static_cast<std::size_t>(ii);
                    const auto sj = static_cast<std::size_t>(jj);
                    const double* x = in.cell(si, sj);
                    double* gx = gin.cell(si, sj);
                    for (std::size_t oc = 0; oc < os[2]; ++oc) {
                        const std::size_t base = ((oc * kh + u) * kw + v) * ch;
                        const double go = g[oc];
                        for (std::size_t c = 0; c < ch; ++c) {
                            gx[c] += w[base + c] * go;
                            gw[base + c] += x[c] * go;
                        }
                    }
                }
            }
        }
    }
}

Tensor pool_forward(const MaxPool& pool, const Tensor& in, const Shape& out_shape, std::vector<std::size_t>& argmax)
{
    Tensor out(out_shape);
    argmax.assign(out.size(), 0);
    const std::size_t ch = in.dim(2);
    for (std::size_t oi = 0; oi < out_shape[0]; ++oi) {
        for (std::size_t oj = 0; oj < out_shape[1]; ++oj) {
            for (std::size_t c = 0; c < ch; ++c) {
                // Row-major scan with strict '>' keeps the first maximum.
                std::size_t best = ((oi * pool.stride) * in.dim(1) + oj * pool.stride) * ch + c;
                for (std::size_t u = 0; u < pool.window_h; ++u) {
                    for (std::size_t v = 0; v < pool.window_w; ++v) {
                        const std::size_t idx = ((oi * pool.stride + u) * in.dim(1) + oj * pool.stride + v) * ch + c;
                        if (in[idx] > in[best]) best = idx;
                    }
                }
                const std::size_t o = (oi * out_shape[1] + oj) * ch + c;
                out[o] = in[best];
                argmax[o] = best;
            }
        }
    }
    return out;
}

Tensor dense_forward(const Dense& dense, const Tensor& in)
{
    const std::size_t rows = dense.weights.dim(0), cols = dense.weights.dim(1);
    std::vector<double> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double acc = dense.bias[r];
        const double* w = dense.weights.cell(r, 0);
        for (std::size_t c = 0; c < cols; ++c) acc += w[c] * in[c];
        out[r] = acc;
    }
    return Tensor::vector(std::move(out));
}

Tensor apply_layer(const Layer& layer, const Tensor& in, const Shape& out_shape, std::vector<std::size_t>& argmax)
{
    return std::visit(overloaded{
                          [&](const Conv2D& conv) { return conv_forward(conv, in, out_shape); },
                          [&](const ReLU&) {
                              Tensor out = in;
                              for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
                              return out;
                          },
                          [&](const MaxPool& pool) { return pool_forward(pool, in, out_shape, argmax); },
                          [&](const Flatten&) { return in.reshaped(out_shape); },
                          [&](const Dense& dense) { return dense_forward(dense, in); },
                      },
                      layer.kind);
}

/// Gradient with respect to the layer input; accumulates parameter gradients into `pg`.
Tensor layer_backward(const Layer& layer, const Tensor& in, const LayerRecord& record, const Tensor& gout,
                      std::optional<ParameterGradient>& pg)
{
    return std::visit(overloaded{
                          [&](const Conv2D& conv) {
                              Tensor gin(in.shape());
                              pg = ParameterGradient{Tensor(conv.weights.shape()), Tensor(conv.bias.shape())};
                              conv_backward(conv, in, gout, gin, *pg);
                              return gin;
                          },
                          [&](const ReLU&) {
                              Tensor gin(in.shape());
                              for (std::size_t i = 0; i < gin.size(); ++i) gin[i] = in[i] > 0.0 ? gout[i] : 0.0;
                              return gin;
                          },
                          [&](const MaxPool&) {
                              Tensor gin(in.shape());
                              for (std::size_t o = 0; o < gout.size(); ++o) gin[record.argmax[o]] += gout[o];
                              return gin;
                          },
                          [&](const Flatten&) { return gout.reshaped(in.shape()); },
                          [&](const Dense& dense) {
                              const std::size_t rows = dense.weights.dim(0), cols = dense.weights.dim(1);
                              Tensor gin(in.shape());
                              pg = ParameterGradient{Tensor(dense.weights.shape()), Tensor(dense.bias.shape())};
                              for (std::size_t r = 0; r < rows; ++r) {
                                  const double g = gout[r];
                                  pg->bias[r] = g;
                                  const double* w = dense.weights.cell(r, 0);
                                  double* gw = pg->weights.cell(r, 0);
                                  for (std::size_t c = 0; c < cols; ++c) {
                                      gin[c] += w[c] * g;
                                      gw[c] = in[c] * g;
                                  }
                              }
                              return gin;
                          },
                      },
                      layer.kind);
}

constexpr std::size_t kNoTap = static_cast<std::size_t>(-1);

std::size_t resolve_tap(const Network& net, const LogitShift& shift)
{
    const auto idx = net.find(shift.tap_layer);
    if (!idx) throw std::invalid_argument("shift tap layer '" + shift.tap_layer + "' not found");
    const Shape& s = net.output_shape(*idx);
    if (s.size() != 3) {
        throw std::invalid_argument("shift tap layer '" + shift.tap_layer + "' is not spatial (output " + to_string(s) +
                                    ")");
    }
    if (shift.row >= s[0] || shift.col >= s[1]) {
        throw std::out_of_range("tap position (" + std::to_string(shift.row) + "," + std::to_string(shift.col) +
                                ") outside layer '" + shift.tap_layer + "' spatial extent " + std::to_string(s[0]) + "x" +
                                std::to_string(s[1]));
    }
    if (shift.only_class && *shift.only_class >= net.class_count()) {
        throw std::out_of_range("shift class out of range");
    }
    if (!std::isfinite(shift.gain)) throw std::invalid_argument("shift gain must be finite");
    return *idx;
}

double shift_value(const LogitShift& shift, const Tensor& tap)
{
    double sum = 0.0;
    for (std::size_t k = 0; k < tap.dim(2); ++k) sum += tap.at(shift.row, shift.col, k);
    return shift.gain * sum;
}

Tensor shifted(Tensor z, const LogitShift* shift, double t)
{
    if (!shift) return z;
    if (shift->only_class) {
        z[*shift->only_class] += t;
    }
    else {
        for (double& v : z.data()) v += t;
    }
    return z;
}

double score_from_logits(const Tensor& z, ScoreSelector sel)
{
    if (sel.class_index >= z.size()) throw std::out_of_range("class index out of range");
    if (sel.kind == ScoreKind::pre_softmax) return z[sel.class_index];
    return softmax(z)[sel.class_index];
}

} // namespace

std::string_view type_name(const LayerKind& kind)
{
    return std::visit(overloaded{
                          [](const Conv2D&) { return std::string_view("conv2d"); },
                          [](const ReLU&) { return std::string_view("relu"); },
                          [](const MaxPool&) { return std::string_view("maxpool"); },
                          [](const Flatten&) { return std::string_view("flatten"); },
                          [](const Dense&) { return std::string_view("dense"); },
                      },
                      kind);
}

Network::Network(Shape input_shape, std::vector<Layer> layers)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers))
{
    if (layers_.empty()) throw std::invalid_argument("network has no layers");
    if (input_shape_.empty() || element_count(input_shape_) == 0) {
        throw std::invalid_argument("invalid network input shape " + to_string(input_shape_));
    }
    std::unordered_set<std::string> names;
    Shape current = input_shape_;
    for (const auto& layer : layers_) {
        if (layer.name.empty() || layer.name == kInputName) {
            throw std::invalid_argument("invalid layer name '" + layer.name + "'");
        }
        if (!names.insert(layer.name).second) throw std::invalid_argument("duplicate layer name '" + layer.name + "'");
        current = infer_output_shape(layer, current);
        output_shapes_.push_back(current);
    }
    if (!std::holds_alternative<Dense>(layers_.back().kind)) {
        throw std::invalid_argument("final layer '" + layers_.back().name + "' must be Dense");
    }
}

std::optional<std::size_t> Network::find(std::string_view name) const
{
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        if (layers_[i].name == name) return i;
    }
    return std::nullopt;
}

std::size_t Network::index_of(std::string_view name) const
{
    if (auto idx = find(name)) return *idx;
    throw std::invalid_argument("unknown layer '" + std::string(name) + "'");
}

const Shape& Network::activation_shape(std::string_view name) const
{
    if (name == kInputName) return input_shape_;
    return output_shapes_[index_of(name)];
}

bool Network::is_spatial(std::string_view name) const
{
    return activation_shape(name).size() == 3;
}

std::optional<std::size_t> Network::last_spatial_layer() const
{
    for (std::size_t i = layers_.size(); i-- > 0;) {
        if (output_shapes_[i].size() == 3) return i;
    }
    return std::nullopt;
}

std::optional<std::size_t> Network::last_pool_layer() const
{
    for (std::size_t i = layers_.size(); i-- > 0;) {
        if (std::holds_alternative<MaxPool>(layers_[i].kind)) return i;
    }
    return std::nullopt;
}

std::size_t Network::parameter_count() const
{
    std::size_t count = 0;
    visit_parameters([&](std::size_t, const Tensor& w, const Tensor& b) { count += w.size() + b.size(); });
    return count;
}

const Tensor& ForwardTrace::activation(std::string_view name) const
{
    if (name == kInputName) return input;
    for (const auto& record : layers) {
        if (record.name == name) return record.output;
    }
    throw std::invalid_argument("trace has no activation '" + std::string(name) + "'");
}

const Tensor& GradientSet::activation(std::string_view name) const
{
    if (name == kInputName) return input;
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (names[i] == name) return activations[i];
    }
    throw std::invalid_argument("gradient set has no activation '" + std::string(name) + "'");
}

std::string_view to_string(ScoreKind kind)
{
    return kind == ScoreKind::pre_softmax ? "pre" : "post";
}

ScoreKind parse_score_kind(std::string_view text)
{
    if (text == "pre") return ScoreKind::pre_softmax;
    if (text == "post") return ScoreKind::post_softmax;
    throw std::invalid_argument("unknown score kind '" + std::string(text) + "' (expected pre or post)");
}

Tensor softmax(const Tensor& z)
{
    if (z.empty()) throw std::invalid_argument("softmax of an empty tensor");
    for (double v : z.data()) {
        if (!std::isfinite(v)) throw std::invalid_argument("softmax input contains a non-finite value");
    }
    const double m = *std::max_element(z.data().begin(), z.data().end());
    std::vector<double> y(z.size());
    double total = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] = std::exp(z[i] - m);
        total += y[i];
    }
    for (double& v : y) v /= total;
    return Tensor(z.shape(), std::move(y));
}

ForwardTrace forward(ModelRef model, const Tensor& input)
{
    const Network& net = model.network();
    if (input.shape() != net.input_shape()) {
        throw std::invalid_argument("input shape " + to_string(input.shape()) + " does not match layer '" +
                                    net.layers().front().name + "' input " + to_string(net.input_shape()));
    }
    const std::size_t tap = model.shift() ? resolve_tap(net, *model.shift()) : kNoTap;

    ForwardTrace trace;
    trace.input = input;
    trace.layers.reserve(net.layers().size());
    const Tensor* current = &trace.input;
    for (std::size_t i = 0; i < net.layers().size(); ++i) {
        LayerRecord record{net.layers()[i].name, {}, {}};
        record.output = apply_layer(net.layers()[i], *current, net.output_shape(i), record.argmax);
        trace.layers.push_back(std::move(record));
        current = &trace.layers.back().output;
    }
    if (tap != kNoTap) trace.shift = shift_value(*model.shift(), trace.layers[tap].output);
    trace.logits = shifted(trace.layers.back().output, model.shift(), trace.shift);
    trace.probabilities = softmax(trace.logits);
    return trace;
}

double score(const ForwardTrace& trace, ScoreSelector sel)
{
    if (sel.class_index >= trace.logits.size()) {
        throw std::out_of_range("class " + std::to_string(sel.class_index) + " out of range for " +
                                std::to_string(trace.logits.size()) + " classes");
    }
    return sel.kind == ScoreKind::pre_softmax ? trace.logits[sel.class_index] : trace.probabilities[sel.class_index];
}

Tensor score_logit_gradient(const ForwardTrace& trace, ScoreSelector sel)
{
    const std::size_t n = trace.logits.size();
    if (sel.class_index >= n) {
        throw std::out_of_range("class " + std::to_string(sel.class_index) + " out of range for " + std::to_string(n) +
                                " classes");
    }
    Tensor g(trace.logits.shape());
    if (sel.kind == ScoreKind::pre_softmax) {
        g[sel.class_index] = 1.0;
        return g;
    }
    const auto& y = trace.probabilities;
    const double yc = y[sel.class_index];
    for (std::size_t i = 0; i < n; ++i) g[i] = yc * ((i == sel.class_index ? 1.0 : 0.0) - y[i]);
    return g;
}

GradientSet backward_from_logits(ModelRef model, const ForwardTrace& trace, const Tensor& logit_grad)
{
    const Network& net = model.network();
    const auto& layers = net.layers();
    if (trace.layers.size() != layers.size()) throw std::invalid_argument("trace does not match network depth");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (trace.layers[i].name != layers[i].name || trace.layers[i].output.shape() != net.output_shape(i)) {
            throw std::invalid_argument("trace does not match network at layer '" + layers[i].name + "'");
        }
    }
    if (logit_grad.shape() != Shape{net.class_count()}) {
        throw std::invalid_argument("logit gradient shape " + to_string(logit_grad.shape()) + " does not match " +
                                    std::to_string(net.class_count()) + " classes");
    }
    const LogitShift* shift = model.shift();
    const std::size_t tap = shift ? resolve_tap(net, *shift) : kNoTap;
    // dS/dt: t enters every logit (or a single one for the control branch).
    double shift_grad = 0.0;
    if (shift) {
        if (shift->only_class) {
            shift_grad = logit_grad[*shift->only_class];
        }
        else {
            for (double g : logit_grad.data()) shift_grad += g;
        }
    }

    GradientSet grads;
    grads.logits = logit_grad;
    grads.names.resize(layers.size());
    grads.activations.resize(layers.size());
    grads.parameters.resize(layers.size());

    Tensor gout = logit_grad;
    for (std::size_t l = layers.size(); l-- > 0;) {
        if (l == tap) {
            const double extra = shift->gain * shift_grad;
            for (std::size_t k = 0; k < gout.dim(2); ++k) gout.at(shift->row, shift->col, k) += extra;
        }
        const Tensor& in = l == 0 ? trace.input : trace.layers[l - 1].output;
        Tensor gin = layer_backward(layers[l], in, trace.layers[l], gout, grads.parameters[l]);
        grads.names[l] = layers[l].name;
        grads.activations[l] = std::move(gout);
        gout = std::move(gin);
    }
    grads.input = std::move(gout);
    return grads;
}

GradientSet backward(ModelRef model, const ForwardTrace& trace, ScoreSelector sel)
{
    return backward_from_logits(model, trace, score_logit_gradient(trace, sel));
}

double cross_entropy(const ForwardTrace& trace, std::size_t label)
{
    const auto& z = trace.logits;
    if (label >= z.size()) throw std::out_of_range("label out of range");
    const double m = *std::max_element(z.data().begin(), z.data().end());
    double total = 0.0;
    for (double v : z.data()) total += std::exp(v - m);
    return -(z[label] - m - std::log(total));
}

LossGradient loss_gradient(ModelRef model, const Tensor& input, std::size_t label)
{
    const ForwardTrace trace = forward(model, input);
    const double loss = cross_entropy(trace, label);
    Tensor dz = trace.probabilities;
    dz[label] -= 1.0;
    return {loss, backward_from_logits(model, trace, dz)};
}

Tensor logits_from(ModelRef model, const ForwardTrace& trace, std::string_view layer, const Tensor& activation)
{
    const Network& net = model.network();
    const std::size_t start = layer == kInputName ? 0 : net.index_of(layer) + 1;
    if (activation.shape() != net.activation_shape(layer)) {
        throw std::invalid_argument("activation shape " + to_string(activation.shape()) + " does not match layer '" +
                                    std::string(layer) + "'");
    }
    const LogitShift* shift = model.shift();
    const std::size_t tap = shift ? resolve_tap(net, *shift) : kNoTap;

    Tensor current = activation;
    double t = 0.0;
    if (tap != kNoTap && tap + 1 < start) t = shift_value(*shift, trace.layers[tap].output);
    if (tap != kNoTap && tap + 1 == start) t = shift_value(*shift, current);
    std::vector<std::size_t> argmax;
    for (std::size_t i = start; i < net.layers().size(); ++i) {
        current = apply_layer(net.layers()[i], current, net.output_shape(i), argmax);
        if (i == tap) t = shift_value(*shift, current);
    }
    return shifted(std::move(current), shift, t);
}

Tensor finite_diff_gradient(ModelRef model, const Tensor& input, ScoreSelector sel, std::string_view target_layer,
                            double h)
{
    if (!(h > 0.0)) throw std::invalid_argument("finite difference step must be positive");
    const ForwardTrace trace = forward(model, input);
    const Tensor& base = trace.activation(target_layer);
    Tensor grad(base.shape());
    Tensor probe = base;
    for (std::size_t i = 0; i < base.size(); ++i) {
        probe[i] = base[i] + h;
        const double plus = score_from_logits(logits_from(model, trace, target_layer, probe), sel);
        probe[i] = base[i] - h;
        const double minus = score_from_logits(logits_from(model, trace, target_layer, probe), sel);
        probe[i] = base[i];
        grad[i] = (plus - minus) / (2.0 * h);
    }
    return grad;
}

double kink_margin(ModelRef model, const ForwardTrace& trace, std::string_view from_layer)
{
    const Network& net = model.network();
    // Layers at or before the perturbed activation are not recomputed.
    const std::size_t first_layer = from_layer == kInputName ? 0 : net.index_of(from_layer) + 1;
    double margin = std::numeric_limits<double>::infinity();
    for (std::size_t l = first_layer; l < net.layers().size(); ++l) {
        const Tensor& in = l == 0 ? trace.input : trace.layers[l - 1].output;
        if (std::holds_alternative<ReLU>(net.layers()[l].kind)) {
            for (double v : in.data()) margin = std::min(margin, std::abs(v));
        }
        else if (const auto* pool = std::get_if<MaxPool>(&net.layers()[l].kind)) {
            const Shape& os = net.output_shape(l);
            const std::size_t ch = in.dim(2);
            if (pool->window_h * pool->window_w < 2) continue;
            // A window of clamped ReLU zeros stays zero under small
            // perturbations; the ReLU margin already covers its inputs.
            const bool after_relu = l > first_layer && std::holds_alternative<ReLU>(net.layers()[l - 1].kind);
            for (std::size_t oi = 0; oi < os[0]; ++oi) {
                for (std::size_t oj = 0; oj < os[1]; ++oj) {
                    for (std::size_t c = 0; c < ch; ++c) {
                        double first = -std::numeric_limits<double>::infinity();
                        double second = first;
                        for (std::size_t u = 0; u < pool->window_h; ++u) {
                            for (std::size_t v = 0; v < pool->window_w; ++v) {
                                const double x = in.at(oi * pool->stride + u, oj * pool->stride + v, c);
                                if (x > first) {
                                    second = first;
                                    first = x;
                                }
                                else if (x > second) {
                                    second = x;
                                }
                            }
                        }
                        if (after_relu && first <= 0.0) continue;
                        margin = std::min(margin, first - second);
                    }
                }
            }
        }
    }
    return margin;
}

std::size_t predict(ModelRef model, const Tensor& input)
{
    return argmax_flat(forward(model, input).probabilities);
}

Region receptive_field(const Network& net, std::string_view from_layer, Region cell, std::string_view to_layer)
{
    const std::size_t from = net.index_of(from_layer);
    const std::ptrdiff_t to = to_layer == kInputName ? -1 : static_cast<std::ptrdiff_t>(net.index_of(to_layer));
    if (to > static_cast<std::ptrdiff_t>(from)) {
        throw std::invalid_argument("layer '" + std::string(to_layer) + "' is downstream of '" +
                                    std::string(from_layer) + "'");
    }
    if (!net.is_spatial(from_layer) || !net.is_spatial(to_layer)) {
        throw std::invalid_argument("receptive field needs spatial layers");
    }
    std::ptrdiff_t r0 = static_cast<std::ptrdiff_t>(cell.row);
    std::ptrdiff_t r1 = r0 + static_cast<std::ptrdiff_t>(cell.rows) - 1;
    std::ptrdiff_t c0 = static_cast<std::ptrdiff_t>(cell.col);
    std::ptrdiff_t c1 = c0 + static_cast<std::ptrdiff_t>(cell.cols) - 1;
    for (auto l = static_cast<std::ptrdiff_t>(from); l > to; --l) {
        const Layer& layer = net.layers()[static_cast<std::size_t>(l)];
        const Shape& in = l == 0 ? net.input_shape() : net.output_shape(static_cast<std::size_t>(l - 1));
        std::visit(overloaded{
                       [&](const Conv2D& conv) {
                           const auto s = static_cast<std::ptrdiff_t>(conv.stride);
                           const auto p = static_cast<std::ptrdiff_t>(conv.padding);
                           r0 = r0 * s - p;
                           r1 = r1 * s - p + static_cast<std::ptrdiff_t>(conv.weights.dim(1)) - 1;
                           c0 = c0 * s - p;
                           c1 = c1 * s - p + static_cast<std::ptrdiff_t>(conv.weights.dim(2)) - 1;
                       },
                       [&](const ReLU&) {},
                       [&](const MaxPool& pool) {
                           const auto s = static_cast<std::ptrdiff_t>(pool.stride);
                           r0 = r0 * s;
                           r1 = r1 * s + static_cast<std::ptrdiff_t>(pool.window_h) - 1;
                           c0 = c0 * s;
                           c1 = c1 * s + static_cast<std::ptrdiff_t>(pool.window_w) - 1;
                       },
                       [&](const auto&) { throw std::invalid_argument("receptive field crosses a non-spatial layer"); },
                   },
                   layer.kind);
        r0 = std::max<std::ptrdiff_t>(r0, 0);
        c0 = std::max<std::ptrdiff_t>(c0, 0);
        r1 = std::min<std::ptrdiff_t>(r1, static_cast<std::ptrdiff_t>(in[0]) - 1);
        c1 = std::min<std::ptrdiff_t>(c1, static_cast<std::ptrdiff_t>(in[1]) - 1);
    }
    return Region{static_cast<std::size_t>(r0), static_cast<std::size_t>(c0), static_cast<std::size_t>(r1 - r0 + 1),
                  static_cast<std::size_t>(c1 - c0 + 1)};
}

} // namespace logitshift

namespace logitshift {

BatchGradient batch_gradient(ModelRef model, std::span<const LabeledSample> batch)
{
    if (batch.empty()) throw std::invalid_argument("empty batch");
    BatchGradient result;
    for (const auto& sample : batch) {
        LossGradient lg = loss_gradient(model, sample.input, sample.label);
        result.loss += lg.loss;
        result.sample_losses.push_back(lg.loss);
        if (result.parameters.empty()) {
            result.parameters = std::move(lg.gradients.parameters);
            continue;
        }
        for (std::size_t l = 0; l < result.parameters.size(); ++l) {
            if (!result.parameters[l]) continue;
            auto& acc = *result.parameters[l];
            const auto& g = *lg.gradients.parameters[l];
            for (std::size_t i = 0; i < acc.weights.size(); ++i) acc.weights[i] += g.weights[i];
            for (std::size_t i = 0; i < acc.bias.size(); ++i) acc.bias[i] += g.bias[i];
        }
    }
    const double n = static_cast<double>(batch.size());
    result.loss /= n;
    for (auto& pg : result.parameters) {
        if (!pg) continue;
        for (double& v : pg->weights.data()) v /= n;
        for (double& v : pg->bias.data()) v /= n;
    }
    return result;
}

} // namespace logitshift
