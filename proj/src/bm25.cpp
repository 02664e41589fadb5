#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <numeric>

#include "kblam/eval.hpp"

namespace kblam {

std::vector<std::string> bm25_terms(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (unsigned char c : text) {
        if (std::isalnum(c)) {
            cur += static_cast<char>(std::tolower(c));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

std::string bm25_document(const KnowledgeTriple& t) { return "The " + t.property + " of " + t.name + ": " + t.value; }

std::vector<double> bm25_scores(std::span<const KnowledgeTriple> docs, std::string_view query, Bm25Params params) {
    const std::size_t n = docs.size();
    std::vector<std::map<std::string, std::size_t>> tf(n);
    std::vector<double> len(n);
    std::map<std::string, std::size_t> df;
    double total_len = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto terms = bm25_terms(bm25_document(docs[i]));
        for (const auto& t : terms) ++tf[i][t];
        for (const auto& [t, _] : tf[i]) ++df[t];
        len[i] = static_cast<double>(terms.size());
        total_len += len[i];
    }
    std::vector<double> scores(n, 0.0);
    if (n == 0) return scores;
    const double avgdl = total_len / static_cast<double>(n);

    // each distinct query term counts once
    auto q = bm25_terms(query);
    std::sort(q.begin(), q.end());
    q.erase(std::unique(q.begin(), q.end()), q.end());
    for (const auto& term : q) {
        const auto it = df.find(term);
        if (it == df.end()) continue;
        const double d = static_cast<double>(it->second);
        const double idf = std::log(1.0 + (static_cast<double>(n) - d + 0.5) / (d + 0.5));
        for (std::size_t i = 0; i < n; ++i) {
            const auto f = tf[i].find(term);
            if (f == tf[i].end()) continue;
            const double x = static_cast<double>(f->second);
            const double norm = avgdl > 0.0 ? len[i] / avgdl : 0.0;
            scores[i] += idf * x * (params.k1 + 1.0) / (x + params.k1 * (1.0 - params.b + params.b * norm));
        }
    }
    return scores;
}

std::vector<std::size_t> bm25_retrieve(const KnowledgeBase& kb, std::string_view query, Bm25Params params) {
    const auto scores = bm25_scores(kb.triples(), query, params);
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return order;
}

} // namespace kblam
