#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace samplernn {

// Config value parsers; failures raise ConfigError naming `key`.
std::size_t parse_count(const std::string& key, const std::string& text);
std::uint64_t parse_u64(const std::string& key, const std::string& text);
double parse_real(const std::string& key, const std::string& text);
bool parse_bool(const std::string& key, const std::string& text);
std::vector<std::size_t> parse_list(const std::string& key, const std::string& text);

std::string join_list(const std::vector<std::size_t>& xs);
/// Round-trippable decimal form of a double.
std::string format_exact(double x);
std::string trim(const std::string& s);

}  // namespace samplernn
