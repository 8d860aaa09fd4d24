#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "udavt/tensor.hpp"

namespace udavt {

// Named parameter tensors with a per-parameter freeze mask. Frozen tensors
// drop out of the autodiff graph (requires_grad=false) and are skipped by
// the optimizer, so their bytes cannot change during training.
template <class S>
class ParamStoreT {
  public:
    struct Entry {
        std::string name;
        TensorT<S> tensor;
        bool frozen = false;
    };

    TensorT<S>& add(const std::string& name, TensorT<S> t) {
        if (index_.count(name)) throw PreconditionError("param '" + name + "' registered twice");
        t.set_requires_grad(true);
        index_[name] = entries_.size();
        entries_.push_back({name, std::move(t), false});
        return entries_.back().tensor;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    TensorT<S>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw PreconditionError("unknown param '" + name + "'");
        return entries_[it->second].tensor;
    }
    const TensorT<S>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw PreconditionError("unknown param '" + name + "'");
        return entries_[it->second].tensor;
    }

    bool frozen(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw PreconditionError("unknown param '" + name + "'");
        return entries_[it->second].frozen;
    }

    void set_frozen(const std::string& name, bool frozen) {
        auto it = index_.find(name);
        if (it == index_.end()) throw PreconditionError("unknown param '" + name + "'");
        entries_[it->second].frozen = frozen;
        entries_[it->second].tensor.set_requires_grad(!frozen);
    }

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }
    size_t count() const { return entries_.size(); }

    void zero_grads() {
        for (auto& e : entries_) e.tensor.zero_grad();
    }

    uint64_t hash_of(const std::string& name) const { return hash_values(at(name).data()); }

    // Order-sensitive digest over a subset (all params by default).
    uint64_t hash_params(bool frozen_only = false) const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& e : entries_) {
            if (frozen_only && !e.frozen) continue;
            h = fnv1a64(e.name, h);
            h = fnv1a64(e.tensor.data().data(), e.tensor.data().size() * sizeof(S), h);
        }
        return h;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) out.push_back(e.name);
        return out;
    }

  private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, size_t> index_;
};

}  // namespace udavt
