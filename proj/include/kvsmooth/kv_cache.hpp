// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "kvsmooth/model.hpp"

namespace kvsmooth {

// Per-layer, per-head key/value store. Storage for max_seq_len positions is
// reserved up front with layout [layer][position][head][head_dim].
//
// A decoding step stages one new position per layer and then commits it, so
// every layer always holds the same number of committed positions.
class KVCache {
public:
    explicit KVCache(const ModelConfig& config);

    std::size_t length() const noexcept { return length_; }
    std::size_t capacity() const noexcept { return capacity_; }
    std::size_t num_layers() const noexcept { return layers_; }
    std::size_t num_heads() const noexcept { return heads_; }
    std::size_t head_dim() const noexcept { return head_dim_; }

    // Writes the tail slot (position length()) of one layer. k and v are
    // [heads * head_dim].
    void stage(std::size_t layer, std::span<const float> k, std::span<const float> v);
    bool staged(std::size_t layer) const { return staged_.at(layer); }
    // Requires every layer to be staged.
    void commit();
    void clear();

    // Positions visible to attention in this layer: committed plus staged.
    std::size_t visible(std::size_t layer) const { return length_ + (staged_.at(layer) ? 1 : 0); }

    std::span<const float> layer_keys(std::size_t layer) const;
    std::span<const float> layer_values(std::size_t layer) const;

    std::span<const float> key(std::size_t layer, std::size_t pos, std::size_t head) const;
    std::span<const float> value(std::size_t layer, std::size_t pos, std::size_t head) const;
    std::span<float> key(std::size_t layer, std::size_t pos, std::size_t head);
    std::span<float> value(std::size_t layer, std::size_t pos, std::size_t head);

private:
    std::size_t offset(std::size_t layer, std::size_t pos, std::size_t head) const;

    std::size_t layers_, heads_, head_dim_, capacity_;
    std::size_t length_ = 0;
    std::vector<bool> staged_;
    std::vector<float> keys_;
    std::vector<float> values_;
};

// What an interceptor sees of one layer's cache during a step: everything up
// to and including the newest position is readable, only the newest position
// is writable, and the length cannot change.
class CacheTailView {
public:
    CacheTailView(KVCache& cache, std::size_t layer);

    std::size_t layer() const noexcept { return layer_; }
    // Index of the newest (just-written) position.
    std::size_t position() const noexcept { return tail_; }
    std::size_t num_heads() const noexcept { return cache_->num_heads(); }
    std::size_t head_dim() const noexcept { return cache_->head_dim(); }

    // Throws Error{CacheAccess} for pos > position().
    std::span<const float> read_key(std::size_t pos, std::size_t head) const;
    std::span<const float> read_value(std::size_t pos, std::size_t head) const;

    // Throws Error{CacheAccess} unless pos == position().
    std::span<float> key(std::size_t pos, std::size_t head);
    std::span<float> value(std::size_t pos, std::size_t head);

private:
    void check_read(std::size_t pos) const;
    void check_write(std::size_t pos) const;

    KVCache* cache_;
    std::size_t layer_;
    std::size_t tail_;
};

}  // namespace kvsmooth
