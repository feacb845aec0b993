#pragma once

// nlohmann/json bindings for configuration types. Private to the library.

#include <set>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "upcycle/checkpoint.hpp"

namespace upcycle::detail {

using nlohmann::json;

json to_json(const TransformerConfig& c);
TransformerConfig transformer_config_from(const json& j);

json parse_json(const std::string& text, const char* what);

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) return fallback;
    return it->get<T>();
}

template <typename T>
T get_required(const json& j, const char* key, const char* what) {
    auto it = j.find(key);
    if (it == j.end()) throw std::invalid_argument(std::string(what) + ": missing field '" + key + "'");
    return it->get<T>();
}

// Copies every tensor the visitor names out of the container; missing or
// mis-shaped tensors are errors, leftovers become warnings.
template <typename Model>
void fill_from_container(const TensorContainer& c, Model& model, LoadReport* report) {
    std::set<std::string> used;
    for_each_param(model, [&](const std::string& name, Tensor& t) {
        auto it = c.tensors.find(name);
        if (it == c.tensors.end()) throw std::runtime_error("container is missing tensor '" + name + "'");
        if (it->second.shape() != t.shape()) {
            throw std::runtime_error("tensor '" + name + "' has shape " + shape_str(it->second.shape()) +
                                     ", expected " + shape_str(t.shape()));
        }
        t = it->second;
        used.insert(name);
    });
    for (const auto& [name, t] : c.tensors) {
        if (!used.count(name) && report) report->warnings.push_back("ignoring unexpected tensor '" + name + "'");
    }
}

template <typename Model>
void add_to_container(TensorContainer& c, const Model& model) {
    for_each_param(model, [&](const std::string& name, const Tensor& t) { c.tensors.emplace(name, t); });
}

}  // namespace upcycle::detail
