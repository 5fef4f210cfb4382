#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "opgrpo/error.hpp"
#include "opgrpo/flow_model.hpp"
#include "opgrpo/rng.hpp"

namespace opgrpo {

struct BufferEntry {
    Trajectory trajectory;  // step_logprobs frozen: they are the behaviour policy record
    double retention_score = 0.0;
    int insert_iteration = 0;
};

enum class OfferOutcome { rejected, inserted, replaced_same_condition, evicted_minimum };

struct OfferResult {
    OfferOutcome outcome = OfferOutcome::rejected;
    std::optional<int> evicted_condition;

    bool accepted() const noexcept { return outcome != OfferOutcome::rejected; }
};

// High-reward replay store with at most one trajectory per condition.
//
// The eviction candidate is the entry with the smallest retention score, ties broken
// by the smallest condition id. An ordered index over (retention, id) keeps it at
// hand; decay rescales every score and rebuilds the index.
class ReplayBuffer {
public:
    ReplayBuffer(std::size_t capacity, double decay_rate) : capacity_(capacity), decay_rate_(decay_rate) {
        if (capacity_ == 0) throw ConfigError("buffer.capacity", "must be positive");
        if (!(decay_rate_ > 0.0 && decay_rate_ <= 1.0)) throw ConfigError("buffer.decay", "must lie in (0, 1]");
    }

    std::size_t capacity() const noexcept { return capacity_; }
    double decay_rate() const noexcept { return decay_rate_; }
    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }
    bool contains(Condition c) const { return entries_.contains(c.id); }
    const std::map<int, BufferEntry>& entries() const noexcept { return entries_; }

    std::optional<std::pair<int, double>> minimum() const {
        if (by_retention_.empty()) return std::nullopt;
        const auto& [score, id] = *by_retention_.begin();
        return std::make_pair(id, score);
    }

    double mean_retention() const {
        if (entries_.empty()) return 0.0;
        double s = 0.0;
        for (const auto& [id, e] : entries_) s += e.retention_score;
        return s / static_cast<double>(entries_.size());
    }

    // Offers the best trajectory of a group (ties: lowest index in `group`).
    OfferResult offer(std::span<const Trajectory> group, int iteration = 0) {
        if (group.empty()) return {};
        const Condition c = group.front().condition;
        std::size_t best = 0;
        for (std::size_t i = 0; i < group.size(); ++i) {
            if (!(group[i].condition == c)) throw StateError("offer: group mixes conditions");
            if (!std::isfinite(group[i].reward)) throw NumericError("offer: non-finite reward");
            if (group[i].reward > group[best].reward) best = i;
        }
        return offer_candidate(group[best], iteration);
    }

    OfferResult offer_candidate(const Trajectory& candidate, int iteration) {
        const int id = candidate.condition.id;
        if (auto it = entries_.find(id); it != entries_.end()) {
            if (!(candidate.reward > it->second.retention_score)) return {};
            by_retention_.erase({it->second.retention_score, id});
            it->second = make_entry(candidate, iteration);
            by_retention_.insert({it->second.retention_score, id});
            return {OfferOutcome::replaced_same_condition, std::nullopt};
        }
        if (entries_.size() < capacity_) {
            store(candidate, iteration);
            return {OfferOutcome::inserted, std::nullopt};
        }
        const auto [min_score, min_id] = *by_retention_.begin();
        if (!(candidate.reward > min_score)) return {};
        by_retention_.erase(by_retention_.begin());
        entries_.erase(min_id);
        store(candidate, iteration);
        return {OfferOutcome::evicted_minimum, min_id};
    }

    void decay() {
        by_retention_.clear();
        for (auto& [id, e] : entries_) {
            e.retention_score *= decay_rate_;
            by_retention_.insert({e.retention_score, id});
        }
    }

    // `count` distinct conditions drawn uniformly from the buffer.
    std::vector<Condition> sample_conditions(std::size_t count, RandomStream& rng) const {
        if (count > entries_.size()) {
            throw StateError("sample_conditions: requested " + std::to_string(count) + " of " +
                             std::to_string(entries_.size()) + " entries");
        }
        std::vector<int> ids;
        ids.reserve(entries_.size());
        for (const auto& [id, e] : entries_) ids.push_back(id);
        // Partial Fisher-Yates.
        for (std::size_t i = 0; i < count; ++i) {
            const std::size_t j = i + rng.index(ids.size() - i);
            std::swap(ids[i], ids[j]);
        }
        std::vector<Condition> out;
        out.reserve(count);
        for (std::size_t i = 0; i < count; ++i) out.push_back(Condition{ids[i]});
        return out;
    }

    // Non-destructive; the copy is tagged as a buffer trajectory.
    Trajectory retrieve(Condition c) const {
        auto it = entries_.find(c.id);
        if (it == entries_.end()) throw StateError("retrieve: condition " + std::to_string(c.id) + " not in buffer");
        Trajectory tr = it->second.trajectory;
        tr.origin = Origin::buffer;
        return tr;
    }

    // Used when restoring a checkpoint.
    void restore(int id, BufferEntry entry) {
        if (entries_.size() >= capacity_ && !entries_.contains(id)) throw FormatError("buffer snapshot exceeds capacity");
        if (auto it = entries_.find(id); it != entries_.end()) by_retention_.erase({it->second.retention_score, id});
        by_retention_.insert({entry.retention_score, id});
        entries_[id] = std::move(entry);
    }

private:
    static BufferEntry make_entry(const Trajectory& tr, int iteration) {
        BufferEntry e;
        e.trajectory = tr;
        e.retention_score = tr.reward;
        e.insert_iteration = iteration;
        return e;
    }

    void store(const Trajectory& tr, int iteration) {
        entries_[tr.condition.id] = make_entry(tr, iteration);
        by_retention_.insert({tr.reward, tr.condition.id});
    }

    std::size_t capacity_;
    double decay_rate_;
    std::map<int, BufferEntry> entries_;
    std::set<std::pair<double, int>> by_retention_;
};

}  // namespace opgrpo
