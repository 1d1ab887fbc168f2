// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#include "kvsmooth/kv_cache.hpp"

#include <algorithm>
#include <string>
#include <utility>

#include "kvsmooth/error.hpp"

namespace kvsmooth {

KVCache::KVCache(const ModelConfig& config)
    : layers_(config.num_layers),
      heads_(config.num_heads),
      head_dim_(config.head_dim),
      capacity_(config.max_seq_len),
      staged_(config.num_layers, false),
      keys_(config.num_layers * config.max_seq_len * config.hidden_dim, 0.0f),
      values_(keys_.size(), 0.0f) {
    config.validate();
}

std::size_t KVCache::offset(std::size_t layer, std::size_t pos, std::size_t head) const {
    if (layer >= layers_ || pos >= capacity_ || head >= heads_) {
        throw Error(Errc::CacheAccess, "index out of range (layer " + std::to_string(layer) + ", pos " +
                                           std::to_string(pos) + ", head " + std::to_string(head) + ")");
    }
    return ((layer * capacity_ + pos) * heads_ + head) * head_dim_;
}

void KVCache::stage(std::size_t layer, std::span<const float> k, std::span<const float> v) {
    if (layer >= layers_) throw Error(Errc::CacheInconsistent, "layer index out of range");
    if (length_ >= capacity_) throw Error(Errc::BudgetExceeded, "cache is full");
    const std::size_t width = heads_ * head_dim_;
    if (k.size() != width || v.size() != width) throw Error(Errc::CacheInconsistent, "k/v width");
    const std::size_t at = offset(layer, length_, 0);
    std::copy(k.begin(), k.end(), keys_.begin() + static_cast<std::ptrdiff_t>(at));
    std::copy(v.begin(), v.end(), values_.begin() + static_cast<std::ptrdiff_t>(at));
    staged_[layer] = true;
}

void KVCache::commit() {
    if (!std::all_of(staged_.begin(), staged_.end(), [](bool b) { return b; })) {
        throw Error(Errc::CacheInconsistent, "commit with unstaged layers");
    }
    ++length_;
    std::fill(staged_.begin(), staged_.end(), false);
}

void KVCache::clear() {
    length_ = 0;
    std::fill(staged_.begin(), staged_.end(), false);
}

std::span<const float> KVCache::layer_keys(std::size_t layer) const {
    return std::span<const float>(keys_).subspan(offset(layer, 0, 0), visible(layer) * heads_ * head_dim_);
}

std::span<const float> KVCache::layer_values(std::size_t layer) const {
    return std::span<const float>(values_).subspan(offset(layer, 0, 0), visible(layer) * heads_ * head_dim_);
}

std::span<const float> KVCache::key(std::size_t layer, std::size_t pos, std::size_t head) const {
    return std::span<const float>(keys_).subspan(offset(layer, pos, head), head_dim_);
}

std::span<const float> KVCache::value(std::size_t layer, std::size_t pos, std::size_t head) const {
    return std::span<const float>(values_).subspan(offset(layer, pos, head), head_dim_);
}

std::span<float> KVCache::key(std::size_t layer, std::size_t pos, std::size_t head) {
    return std::span<float>(keys_).subspan(offset(layer, pos, head), head_dim_);
}

std::span<float> KVCache::value(std::size_t layer, std::size_t pos, std::size_t head) {
    return std::span<float>(values_).subspan(offset(layer, pos, head), head_dim_);
}

CacheTailView::CacheTailView(KVCache& cache, std::size_t layer) : cache_(&cache), layer_(layer) {
    const std::size_t n = cache.visible(layer);
    if (n == 0) throw Error(Errc::CacheAccess, "empty cache has no tail");
    tail_ = n - 1;
}

void CacheTailView::check_read(std::size_t pos) const {
    if (pos > tail_) {
        throw Error(Errc::CacheAccess, "read past the tail (" + std::to_string(pos) + " > " +
                                           std::to_string(tail_) + ")");
    }
}

void CacheTailView::check_write(std::size_t pos) const {
    if (pos != tail_) {
        throw Error(Errc::CacheAccess, "only the newest position " + std::to_string(tail_) +
                                           " is writable, not " + std::to_string(pos));
    }
}

std::span<const float> CacheTailView::read_key(std::size_t pos, std::size_t head) const {
    check_read(pos);
    return std::as_const(*cache_).key(layer_, pos, head);
}

std::span<const float> CacheTailView::read_value(std::size_t pos, std::size_t head) const {
    check_read(pos);
    return std::as_const(*cache_).value(layer_, pos, head);
}

std::span<float> CacheTailView::key(std::size_t pos, std::size_t head) {
    check_write(pos);
    return cache_->key(layer_, pos, head);
}

std::span<float> CacheTailView::value(std::size_t pos, std::size_t head) {
    check_write(pos);
    return cache_->value(layer_, pos, head);
}

}  // namespace kvsmooth
