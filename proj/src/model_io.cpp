#include "logitshift/model_io.hpp"

#include "logitshift/file_util.hpp"

#include <json.hpp>

#include <stdexcept>

namespace logitshift {

namespace {

using ojson = nlohmann::ordered_json;

ojson nested(const Tensor& t, std::size_t axis, std::size_t offset)
{
    ojson out = ojson::array();
    const std::size_t n = t.shape()[axis];
    if (axis + 1 == t.rank()) {
        for (std::size_t i = 0; i < n; ++i) out.push_back(t[offset + i]);
        return out;
    }
    std::size_t stride = 1;
    for (std::size_t a = axis + 1; a < t.rank(); ++a) stride *= t.shape()[a];
    for (std::size_t i = 0; i < n; ++i) out.push_back(nested(t, axis + 1, offset + i * stride));
    return out;
}

ojson to_json(const Tensor& t)
{
    return nested(t, 0, 0);
}

void flatten_into(const nlohmann::json& j, std::size_t depth, Shape& shape, std::vector<double>& data,
                  const std::string& field)
{
    if (j.is_number()) {
        if (depth != shape.size() && !shape.empty()) throw std::runtime_error("ragged array in '" + field + "'");
        if (shape.empty() && depth == 0) throw std::runtime_error("'" + field + "' must be an array");
        data.push_back(j.get<double>());
        return;
    }
    if (!j.is_array() || j.empty()) throw std::runtime_error("'" + field + "' must be a non-empty numeric array");
    if (depth == shape.size()) {
        shape.push_back(j.size());
    }
    else if (shape[depth] != j.size()) {
        throw std::runtime_error("ragged array in '" + field + "'");
    }
    for (const auto& item : j) flatten_into(item, depth + 1, shape, data, field);
}

Tensor tensor_from_json(const nlohmann::json& j, const std::string& field)
{
    Shape shape;
    std::vector<double> data;
    flatten_into(j, 0, shape, data, field);
    if (element_count(shape) != data.size()) throw std::runtime_error("ragged array in '" + field + "'");
    return Tensor(std::move(shape), std::move(data));
}

template <class T>
T field(const nlohmann::json& j, const char* key, const std::string& where)
{
    if (!j.contains(key)) throw std::runtime_error(where + ": missing field '" + key + "'");
    try {
        return j.at(key).get<T>();
    }
    catch (const nlohmann::json::exception&) {
        throw std::runtime_error(where + ": field '" + key + "' has the wrong type");
    }
}

} // namespace

std::optional<AttackedNetwork> ModelFile::attacked() const
{
    if (!attack) return std::nullopt;
    return AttackedNetwork(network, *attack, control_class);
}

std::string serialize_model(const Network& net, const AttackConfig* attack, std::optional<std::size_t> control_class)
{
    ojson doc;
    doc["format"] = kModelFormat;
    doc["version"] = kModelVersion;
    doc["input_shape"] = net.input_shape();
    doc["class_count"] = net.class_count();
    auto& layers = doc["layers"] = ojson::array();
    for (const auto& layer : net.layers()) {
        ojson l;
        l["name"] = layer.name;
        l["type"] = type_name(layer.kind);
        if (const auto* conv = std::get_if<Conv2D>(&layer.kind)) {
            l["stride"] = conv->stride;
            l["padding"] = conv->padding;
            l["weights"] = to_json(conv->weights);
            l["bias"] = to_json(conv->bias);
        }
        else if (const auto* pool = std::get_if<MaxPool>(&layer.kind)) {
            l["window"] = {pool->window_h, pool->window_w};
            l["stride"] = pool->stride;
        }
        else if (const auto* dense = std::get_if<Dense>(&layer.kind)) {
            l["weights"] = to_json(dense->weights);
            l["bias"] = to_json(dense->bias);
        }
        layers.push_back(std::move(l));
    }
    if (attack) {
        ojson a;
        a["tap_layer"] = attack->tap_layer;
        a["i0"] = attack->row;
        a["j0"] = attack->col;
        a["K"] = attack->gain;
        if (control_class) a["control_class"] = *control_class;
        doc["attack"] = std::move(a);
    }
    return doc.dump(1) + "\n";
}

std::string serialize_model(const AttackedNetwork& atk)
{
    return serialize_model(atk.base(), &atk.config(), atk.control_class());
}

ModelFile parse_model(std::string_view text)
{
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    }
    catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error(std::string("model file is not valid JSON: ") + e.what());
    }
    if (!doc.is_object() || doc.value("format", "") != kModelFormat) {
        throw std::runtime_error("not a model manifest (format tag missing)");
    }
    const int version = field<int>(doc, "version", "model");
    if (version != kModelVersion) throw std::runtime_error("unsupported model version " + std::to_string(version));

    const auto input_shape = field<Shape>(doc, "input_shape", "model");
    if (!doc.contains("layers") || !doc["layers"].is_array()) throw std::runtime_error("model: missing 'layers' array");

    std::vector<Layer> layers;
    for (const auto& l : doc["layers"]) {
        const auto name = field<std::string>(l, "name", "layer");
        const auto type = field<std::string>(l, "type", "layer '" + name + "'");
        const std::string where = "layer '" + name + "'";
        if (type == "conv2d") {
            layers.push_back({name, Conv2D{tensor_from_json(l.at("weights"), name + ".weights"),
                                           tensor_from_json(l.at("bias"), name + ".bias"),
                                           field<std::size_t>(l, "stride", where),
                                           field<std::size_t>(l, "padding", where)}});
        }
        else if (type == "relu") {
            layers.push_back({name, ReLU{}});
        }
        else if (type == "maxpool") {
            const auto window = field<std::vector<std::size_t>>(l, "window", where);
            if (window.size() != 2) throw std::runtime_error(where + ": 'window' needs two entries");
            layers.push_back({name, MaxPool{window[0], window[1], field<std::size_t>(l, "stride", where)}});
        }
        else if (type == "flatten") {
            layers.push_back({name, Flatten{}});
        }
        else if (type == "dense") {
            if (!l.contains("weights") || !l.contains("bias")) throw std::runtime_error(where + ": missing parameters");
            layers.push_back({name, Dense{tensor_from_json(l.at("weights"), name + ".weights"),
                                          tensor_from_json(l.at("bias"), name + ".bias")}});
        }
        else {
            throw std::runtime_error(where + ": unknown layer type '" + type + "'");
        }
    }

    ModelFile file;
    try {
        file.network = std::make_shared<const Network>(input_shape, std::move(layers));
    }
    catch (const std::invalid_argument& e) {
        throw std::runtime_error(std::string("invalid network: ") + e.what());
    }
    if (doc.contains("class_count") && doc["class_count"].get<std::size_t>() != file.network->class_count()) {
        throw std::runtime_error("class_count does not match the final layer");
    }
    if (doc.contains("attack") && !doc["attack"].is_null()) {
        const auto& a = doc["attack"];
        file.attack = AttackConfig{field<std::string>(a, "tap_layer", "attack"), field<std::size_t>(a, "i0", "attack"),
                                   field<std::size_t>(a, "j0", "attack"), field<double>(a, "K", "attack")};
        if (a.contains("control_class")) file.control_class = a["control_class"].get<std::size_t>();
        // Validates the stanza against the network.
        (void)file.attacked();
    }
    return file;
}

ModelFile load_model(const std::filesystem::path& path)
{
    return parse_model(read_file(path));
}

void save_model(const std::filesystem::path& path, const Network& net, const AttackConfig* attack,
                std::optional<std::size_t> control_class)
{
    write_file_atomic(path, serialize_model(net, attack, control_class));
}

} // namespace logitshift
