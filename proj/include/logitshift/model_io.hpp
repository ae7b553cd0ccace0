#ifndef LOGITSHIFT_MODEL_IO_HPP
#define LOGITSHIFT_MODEL_IO_HPP

#include "logitshift/network.hpp"
#include "logitshift/surgery.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

namespace logitshift {

inline constexpr std::string_view kModelFormat = "logitshift.model";
inline constexpr int kModelVersion = 1;

/// Contents of a model manifest: the network and, for attacked models, the
/// attack stanza.
struct ModelFile
{
    std::shared_ptr<const Network> network;
    std::optional<AttackConfig> attack;
    std::optional<std::size_t> control_class;

    /// The attacked network when an attack stanza is present.
    std::optional<AttackedNetwork> attacked() const;
};

std::string serialize_model(const Network& net, const AttackConfig* attack = nullptr,
                            std::optional<std::size_t> control_class = std::nullopt);
std::string serialize_model(const AttackedNetwork& atk);

/// Throws std::runtime_error with the offending field for malformed input.
ModelFile parse_model(std::string_view text);

ModelFile load_model(const std::filesystem::path& path);
void save_model(const std::filesystem::path& path, const Network& net, const AttackConfig* attack = nullptr,
                std::optional<std::size_t> control_class = std::nullopt);

} // namespace logitshift

#endif
