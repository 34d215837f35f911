#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmgl/attention.hpp"
#include "mmgl/common.hpp"
#include "mmgl/optim.hpp"
#include "mmgl/prompt.hpp"
#include "mmgl/tensor.hpp"

namespace mmgl {

// word-level vocabulary; reserved ids first, then first-appearance order
class Vocabulary {
public:
    static constexpr std::size_t kUnk = 0;
    static constexpr std::size_t kEos = 1;
    static constexpr std::size_t kImage = 2;
    static constexpr std::size_t kGraph = 3;

    Vocabulary() {
        add("<unk>");
        add("<eos>");
        add(kImageMarker);
        add(kGraphMarker);
    }

    std::size_t add(const std::string& word) {
        auto it = ids_.find(word);
        if (it != ids_.end()) return it->second;
        const std::size_t id = words_.size();
        words_.push_back(word);
        ids_.emplace(word, id);
        return id;
    }

    std::size_t id(const std::string& word) const {
        auto it = ids_.find(word);
        return it == ids_.end() ? kUnk : it->second;
    }

    bool contains(const std::string& word) const { return ids_.count(word) > 0; }

    const std::string& word(std::size_t id) const {
        if (id >= words_.size()) throw InvariantError("vocabulary id out of range");
        return words_[id];
    }

    std::size_t size() const { return words_.size(); }

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, std::size_t> ids_;
};

// token stream for decoder-side training: text split on whitespace, slots
// rendered as single opaque marker tokens
inline std::vector<std::string> corpus_tokens(const PromptSequence& seq) {
    std::vector<std::string> out;
    for (const auto& s : seq.segments) {
        switch (s.kind) {
            case SegmentKind::Text: {
                auto toks = tokenize(s.text);
                out.insert(out.end(), toks.begin(), toks.end());
                break;
            }
            case SegmentKind::ImageSlot: out.push_back(kImageMarker); break;
            case SegmentKind::GraphSlot: out.push_back(kGraphMarker); break;
        }
    }
    return out;
}

struct DecoderConfig {
    std::size_t d_dec = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t ffn_mult = 2;
    double lr = 1e-3;
    std::size_t epochs = 20;
    double answer_weight = 10.0;  // extra loss weight on answer and eos positions
    std::uint64_t seed = 7;

    void check() const {
        if (d_dec == 0 || n_layers == 0 || n_heads == 0 || ffn_mult == 0)
            throw ConfigError("decoder dims must be positive");
        if (d_dec % n_heads != 0) throw ConfigError("d_dec must divide evenly into heads");
        if (lr <= 0) throw ConfigError("decoder lr must be positive");
        if (answer_weight < 1.0) throw ConfigError("answer_weight must be at least 1");
    }
};

struct DecoderBlock {
    AttentionParams attn;
    Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

class FrozenDecoder {
public:
    DecoderConfig cfg;
    Vocabulary vocab;
    Tensor embedding;  // V x d_dec, tied with the output head
    std::vector<DecoderBlock> blocks;
    Tensor final_gain, final_bias;

    static FrozenDecoder init(const DecoderConfig& cfg, Vocabulary vocab, Rng& rng) {
        cfg.check();
        if (vocab.size() < 5) throw ConfigError("decoder vocabulary is degenerate");
        FrozenDecoder dec;
        dec.cfg = cfg;
        dec.vocab = std::move(vocab);
        const std::size_t d = cfg.d_dec;
        dec.embedding = Tensor::normal_init({dec.vocab.size(), d}, 0.05, rng);
        dec.embedding.set_requires_grad(true);
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            DecoderBlock b;
            b.attn = AttentionParams::init(d, rng);
            b.ln1_gain = Tensor::from_vector({1, d}, std::vector<double>(d, 1.0), true);
            b.ln1_bias = Tensor::zeros({1, d}, true);
            b.ln2_gain = Tensor::from_vector({1, d}, std::vector<double>(d, 1.0), true);
            b.ln2_bias = Tensor::zeros({1, d}, true);
            b.ffn_w1 = Tensor::uniform_init({d, d * cfg.ffn_mult}, d, rng);
            b.ffn_b1 = Tensor::zeros({1, d * cfg.ffn_mult}, true);
            b.ffn_w2 = Tensor::uniform_init({d * cfg.ffn_mult, d}, d * cfg.ffn_mult, rng);
            b.ffn_b2 = Tensor::zeros({1, d}, true);
            dec.blocks.push_back(std::move(b));
        }
        dec.final_gain = Tensor::from_vector({1, d}, std::vector<double>(d, 1.0), true);
        dec.final_bias = Tensor::zeros({1, d}, true);
        return dec;
    }

    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out{embedding};
        for (const auto& b : blocks) {
            for (const auto& t : b.attn.tensors()) out.push_back(t);
            out.insert(out.end(), {b.ln1_gain, b.ln1_bias, b.ln2_gain, b.ln2_bias,
                                   b.ffn_w1, b.ffn_b1, b.ffn_w2, b.ffn_b2});
        }
        out.push_back(final_gain);
        out.push_back(final_bias);
        return out;
    }

    NamedTensorList named() const {
        NamedTensorList out;
        out.emplace_back("embedding", embedding);
        for (std::size_t l = 0; l < blocks.size(); ++l) {
            const auto& b = blocks[l];
            const std::string p = "block" + std::to_string(l) + ".";
            out.emplace_back(p + "attn.wq", b.attn.wq);
            out.emplace_back(p + "attn.wk", b.attn.wk);
            out.emplace_back(p + "attn.wv", b.attn.wv);
            out.emplace_back(p + "attn.wo", b.attn.wo);
            out.emplace_back(p + "ln1.gain", b.ln1_gain);
            out.emplace_back(p + "ln1.bias", b.ln1_bias);
            out.emplace_back(p + "ln2.gain", b.ln2_gain);
            out.emplace_back(p + "ln2.bias", b.ln2_bias);
            out.emplace_back(p + "ffn.w1", b.ffn_w1);
            out.emplace_back(p + "ffn.b1", b.ffn_b1);
            out.emplace_back(p + "ffn.w2", b.ffn_w2);
            out.emplace_back(p + "ffn.b2", b.ffn_b2);
        }
        out.emplace_back("final.gain", final_gain);
        out.emplace_back("final.bias", final_bias);
        return out;
    }

    void freeze() {
        for (auto& t : tensors()) t.set_requires_grad(false);
        frozen_ = true;
    }

    bool frozen() const { return frozen_; }

    // x: T x d_dec input embeddings; returns T x V logits via the tied head
    Tensor forward(Tape& tp, const Tensor& x) const {
        if (x.cols() != cfg.d_dec) throw InvariantError("decoder input dim mismatch");
        if (x.rows() == 0) throw InvariantError("decoder input is empty");
        auto mask = causal_mask(x.rows());
        Tensor h = x;
        for (const auto& b : blocks) {
            auto n1 = tp.layer_norm(h, b.ln1_gain, b.ln1_bias);
            h = tp.add(h, attention(tp, b.attn, n1, n1, n1, cfg.n_heads, &mask));
            auto n2 = tp.layer_norm(h, b.ln2_gain, b.ln2_bias);
            auto f = tp.add_row(
                tp.matmul(tp.gelu(tp.add_row(tp.matmul(n2, b.ffn_w1), b.ffn_b1)), b.ffn_w2),
                b.ffn_b2);
            h = tp.add(h, f);
        }
        h = tp.layer_norm(h, final_gain, final_bias);
        return tp.matmul_nt(h, embedding);
    }

    Tensor embed_ids(Tape& tp, const std::vector<std::size_t>& ids) const {
        for (auto id : ids)
            if (id >= vocab.size()) throw InvariantError("token id out of vocabulary range");
        return tp.gather_rows(embedding, ids);
    }

    std::vector<std::size_t> encode_words(const std::vector<std::string>& words) const {
        std::vector<std::size_t> ids;
        ids.reserve(words.size());
        for (const auto& w : words) ids.push_back(vocab.id(w));
        return ids;
    }

private:
    bool frozen_ = false;
};

struct DecoderPretrainResult {
    FrozenDecoder decoder;
    std::vector<double> loss_history;  // per epoch mean
};

// next-token language modeling over text-rendered prompts; slots stay opaque
// marker tokens here, continuous inputs only appear later during tuning
inline DecoderPretrainResult pretrain_decoder(const std::vector<PromptSequence>& corpus,
                                              const DecoderConfig& cfg) {
    cfg.check();
    if (corpus.empty()) throw ConfigError("decoder pretraining corpus is empty");

    Vocabulary vocab;
    std::vector<std::vector<std::size_t>> streams;
    std::vector<std::size_t> answer_starts;  // first target row of the answer span, or npos
    for (const auto& seq : corpus) {
        std::vector<std::size_t> ids;
        for (const auto& w : corpus_tokens(seq)) ids.push_back(vocab.add(w));
        const std::size_t prompt_len = ids.size();
        for (const auto& w : tokenize(seq.answer)) ids.push_back(vocab.add(w));
        const bool has_answer = ids.size() > prompt_len && prompt_len > 0;
        ids.push_back(Vocabulary::kEos);
        if (ids.size() < 2) throw InvariantError("degenerate training stream");
        answer_starts.push_back(has_answer ? prompt_len - 1 : std::string::npos);
        streams.push_back(std::move(ids));
    }

    Rng rng(mix_seed(cfg.seed, 0xDEC0));
    DecoderPretrainResult out{FrozenDecoder::init(cfg, std::move(vocab), rng), {}};
    auto& dec = out.decoder;

    AdamConfig acfg;
    acfg.lr = cfg.lr;
    AdamState adam(dec.tensors(), acfg);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double epoch_loss = 0;
        for (std::size_t s = 0; s < streams.size(); ++s) {
            const auto& ids = streams[s];
            Tape tp;
            auto inputs = std::vector<std::size_t>(ids.begin(), ids.end() - 1);
            auto targets = std::vector<std::size_t>(ids.begin() + 1, ids.end());
            auto logits = dec.forward(tp, dec.embed_ids(tp, inputs));
            auto loss = tp.cross_entropy_logits(logits, targets);
            const std::size_t start = answer_starts[s];
            if (cfg.answer_weight > 1.0 && start != std::string::npos) {
                // reweight the answer span: plain next-token loss plus extra
                // mass on the positions that produce the answer and its eos
                const std::size_t span = targets.size() - start;
                auto span_targets = std::vector<std::size_t>(targets.begin() + start, targets.end());
                auto span_loss = tp.cross_entropy_logits(
                    tp.slice_rows(logits, start, span), span_targets);
                const double extra = (cfg.answer_weight - 1.0) * static_cast<double>(span);
                const double denom = static_cast<double>(targets.size()) + extra;
                loss = tp.add(tp.scale(loss, static_cast<double>(targets.size()) / denom),
                              tp.scale(span_loss, extra / denom));
            }
            tp.backward(loss);
            adam.step();
            epoch_loss += loss.item();
        }
        out.loss_history.push_back(epoch_loss / static_cast<double>(streams.size()));
    }
    dec.freeze();
    return out;
}

}  // namespace mmgl
