#include "perp/adapters.hpp"

#include <numeric>

namespace perp {

std::string to_string(AdapterKind kind) {
  switch (kind) {
    case AdapterKind::lora: return "lora";
    case AdapterKind::lora_prune: return "lora-prune";
    case AdapterKind::mult_lora: return "mult-lora";
    case AdapterKind::masked_lora: return "masked-lora";
  }
  return "?";
}

AdapterKind parse_adapter_kind(const std::string& name) {
  for (auto k : {AdapterKind::lora, AdapterKind::lora_prune, AdapterKind::mult_lora, AdapterKind::masked_lora}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown adapter kind '" + name + "' (lora | lora-prune | mult-lora | masked-lora)");
}

std::size_t MergeReport::pre_nonzeros() const {
  return static_cast<std::size_t>(std::accumulate(pre_support.begin(), pre_support.end(), std::size_t{0}));
}

std::size_t MergeReport::post_nonzeros() const {
  return static_cast<std::size_t>(std::accumulate(post_support.begin(), post_support.end(), std::size_t{0}));
}

AdapterSet attach_adapters(TaggedModel& model, AdapterKind kind, const AdapterOptions& opts, std::uint64_t seed,
                           const MaskSet* masks) {
  AdapterSet out;
  const auto& sites = model.linear_sites();
  for (std::size_t s = 0; s < sites.size(); ++s) {
    auto& w = model.param(sites[s].weight).var;
    w.set_requires_grad(false);
    const Tensor<float>* mask = nullptr;
    if (masks) {
      if (auto it = masks->find(sites[s].weight); it != masks->end()) mask = &it->second.bits;
    }
    if (needs_mask(kind) && !mask) throw ConfigError(to_string(kind) + ": no mask for " + sites[s].weight);
    if (kind == AdapterKind::lora) mask = nullptr;
    // Distinct stream per site, independent of how many sites precede it.
    const std::uint64_t site_seed = seed * 0x9E3779B97F4A7C15ull + s + 1;
    out.emplace(sites[s].weight, attach(w, kind, opts, site_seed, mask, sites[s].weight));
  }
  return out;
}

ForwardHooks adapter_hooks(const TaggedModel& model, const AdapterSet& adapters) {
  std::vector<const AdapterPair<float>*> by_site;
  for (const auto& site : model.linear_sites()) {
    auto it = adapters.find(site.weight);
    by_site.push_back(it == adapters.end() ? nullptr : &it->second);
  }
  ForwardHooks hooks;
  hooks.linear = [by_site](std::size_t s, const Var<float>& x,
                           const Var<float>& w) -> std::optional<Var<float>> {
    if (s >= by_site.size() || !by_site[s]) return std::nullopt;
    return adapter_forward(*by_site[s], w, x);
  };
  return hooks;
}

std::vector<Var<float>> adapter_parameters(const TaggedModel& model, const AdapterSet& adapters) {
  std::vector<Var<float>> out;
  for (const auto& site : model.linear_sites()) {
    if (auto it = adapters.find(site.weight); it != adapters.end()) {
      out.push_back(it->second.B);
      out.push_back(it->second.A);
    }
  }
  return out;
}

std::size_t adapter_entry_count(const AdapterSet& adapters) {
  std::size_t n = 0;
  for (const auto& [name, p] : adapters) n += p.B.numel() + p.A.numel();
  return n;
}

std::vector<MergeReport> merge_adapters(TaggedModel& model, const AdapterSet& adapters, std::size_t probes) {
  std::vector<MergeReport> reports;
  for (const auto& site : model.linear_sites()) {
    auto it = adapters.find(site.weight);
    if (it == adapters.end()) continue;
    auto& w = model.param(site.weight).var.mutable_value();
    auto [merged, rep] = merge(it->second, w, probes);
    if (rep.mergeable) w = std::move(merged);
    reports.push_back(std::move(rep));
  }
  return reports;
}

}  // namespace perp
