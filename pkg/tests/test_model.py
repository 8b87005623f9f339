import math

import numpy as np
import pytest
import torch

from vlhumor.model import (
    ModelConfig,
    TwoBranchModel,
    build_language_batch,
    collate,
    fused_block_bounds,
    fused_seq_len,
    language_seq_len,
    video_seq_len,
)
from vlhumor.signal_prep import Modalities

from conftest import TINY, make_tiny_sample

FULL = ModelConfig(dim=8, heads=2, layers=1, vocab_size=32, classifier_hidden=8, ffn_mult=2)


def full_size_sample(i, title_len=16, n_comments=10, comment_len=16, mel_frames=256):
    from vlhumor.signal_prep import ProcessedSample

    rng = np.random.default_rng(i)
    return ProcessedSample(
        id=f"full-{i}",
        vision=rng.random((48, 3, 224, 224), dtype=np.float32),
        mel=rng.random((mel_frames, 128), dtype=np.float32),
        title_tokens=[int(rng.integers(4, 32)) for _ in range(title_len)],
        comment_tokens=[[int(rng.integers(4, 32)) for _ in range(comment_len)]
                        for _ in range(n_comments)],
        label=i % 2,
    )


class TestSequenceArithmetic:
    def test_paper_scale_block_lengths(self):
        cfg = FULL
        assert cfg.vision_rows == 392
        assert cfg.audio_rows(256) == 128
        mask = Modalities()
        assert video_seq_len(cfg, mask) == 1 + 392 + 1 + 128 == 522
        assert language_seq_len(16, [16] * 10, mask) == 1 + 16 + 1 + 160 + 1 == 179
        assert fused_seq_len(cfg, mask, 16, [16] * 10) == 701

    def test_audio_masked_video_length(self):
        mask = Modalities(audio=False)
        assert video_seq_len(FULL, mask) == 393

    def test_title_only_language_length(self):
        mask = Modalities()
        assert language_seq_len(5, [], mask) == 7

    def test_minimal_audio(self):
        assert FULL.audio_rows(16) == 8

    def test_block_bounds_full_mask(self):
        bounds = fused_block_bounds(FULL, Modalities())
        assert bounds == {"V": (0, 393), "A": (393, 522), "T": (522, 540), "C": (540, 701)}

    def test_block_bounds_no_title(self):
        bounds = fused_block_bounds(FULL, Modalities(title=False))
        assert bounds["C"] == (522, 684)


@pytest.fixture(scope="module")
def tiny_model():
    torch.manual_seed(0)
    return TwoBranchModel(ModelConfig(**TINY))


class TestEmbeddings:
    def test_vision_row_count(self, tiny_model):
        v = torch.rand(2, 4, 3, 8, 8)
        out = tiny_model.embed_vision(v)
        assert out.shape == (2, 8, 8)  # (4/2)*(8/4)*(8/4) rows

    def test_zero_input_zero_positions_gives_bias(self, tiny_model):
        v = torch.zeros(1, 4, 3, 8, 8)
        rows = tiny_model.embed_vision(v, add_positions=False)
        expected = tiny_model.vision_proj.bias.detach()
        assert torch.allclose(rows[0], expected.expand(8, -1))

    def test_permuting_tubelets_permutes_rows(self, tiny_model):
        v = torch.rand(1, 4, 3, 8, 8)
        rows = tiny_model.embed_vision(v, add_positions=False).detach()
        # swap the two temporal tubelets at spatial block (0, 0):
        # rows are ordered frame-major, so row 0 <-> row 4
        swapped = v.clone()
        swapped[:, 0:2, :, 0:4, 0:4] = v[:, 2:4, :, 0:4, 0:4]
        swapped[:, 2:4, :, 0:4, 0:4] = v[:, 0:2, :, 0:4, 0:4]
        rows2 = tiny_model.embed_vision(swapped, add_positions=False).detach()
        assert torch.allclose(rows2[0, 0], rows[0, 4], atol=1e-6)
        assert torch.allclose(rows2[0, 4], rows[0, 0], atol=1e-6)
        for keep in (1, 2, 3, 5, 6, 7):
            assert torch.allclose(rows2[0, keep], rows[0, keep], atol=1e-6)

    def test_audio_row_count(self, tiny_model):
        out = tiny_model.embed_audio(torch.rand(3, 16, 8))
        assert out.shape == (3, 8, 8)

    def test_audio_minimal(self, tiny_model):
        out = tiny_model.embed_audio(torch.rand(1, 4, 8))
        assert out.shape == (1, 2, 8)

    def test_zero_mel_zero_positions_bias_rows(self, tiny_model):
        rows = tiny_model.embed_audio(torch.zeros(1, 16, 8), add_positions=False)
        expected = tiny_model.audio_proj.bias.detach()
        assert torch.allclose(rows[0], expected.expand(8, -1))

    def test_indivisible_mel_rejected(self, tiny_model):
        with pytest.raises(ValueError, match="divisible"):
            tiny_model.embed_audio(torch.rand(1, 15, 8))

    def test_wrong_vision_shape_rejected(self, tiny_model):
        with pytest.raises(ValueError, match="vision shape"):
            tiny_model.embed_vision(torch.rand(1, 4, 3, 9, 8))


class TestBranches:
    def test_video_sequence_lengths(self, tiny_model):
        cfg = tiny_model.config
        out = tiny_model.encode_video(torch.rand(2, 4, 3, 8, 8), torch.rand(2, 16, 8))
        assert out.sequence.shape == (2, 1 + 8 + 1 + 8, cfg.dim)
        out = tiny_model.encode_video(torch.rand(2, 4, 3, 8, 8), None)
        assert out.sequence.shape == (2, 9, cfg.dim)
        out = tiny_model.encode_video(None, torch.rand(2, 16, 8))
        assert out.sequence.shape == (2, 9, cfg.dim)

    def test_video_empty_rejected(self, tiny_model):
        with pytest.raises(ValueError, match="at least one"):
            tiny_model.encode_video(None, None)

    def test_pooled_is_row_zero(self, tiny_model):
        tiny_model.eval()
        out = tiny_model.encode_video(torch.rand(2, 4, 3, 8, 8), torch.rand(2, 16, 8))
        assert torch.equal(out.pooled, out.sequence[:, 0])

    def test_language_layout_lengths(self, tiny_model):
        cfg = tiny_model.config
        samples = [make_tiny_sample(0, title_len=3, comment_lens=(2, 1))]
        batch = build_language_batch(samples, cfg, Modalities())
        # [CLS] 3 [SEP] 3 [SEP] = 9
        assert batch.ids.shape == (1, 9)
        out = tiny_model.encode_language(batch)
        assert out.sequence.shape == (1, 9, cfg.dim)
        assert torch.equal(out.pooled, out.sequence[:, 0])

    def test_language_deterministic_in_eval(self, tiny_model):
        tiny_model.eval()
        samples = [make_tiny_sample(1)]
        batch = build_language_batch(samples, tiny_model.config, Modalities())
        a = tiny_model.encode_language(batch).pooled
        b = tiny_model.encode_language(batch).pooled
        assert torch.equal(a, b)

    def test_language_empty_rejected(self, tiny_model):
        sample = make_tiny_sample(2, title_len=0, comment_lens=())
        with pytest.raises(ValueError, match="no language content"):
            build_language_batch([sample], tiny_model.config, Modalities())

    def test_padding_is_masked(self, tiny_model):
        tiny_model.eval()
        cfg = tiny_model.config
        short = make_tiny_sample(3, title_len=2, comment_lens=(1,))
        longer = make_tiny_sample(4, title_len=4, comment_lens=(4, 4))
        alone = build_language_batch([short], cfg, Modalities())
        padded = build_language_batch([short, longer], cfg, Modalities())
        a = tiny_model.encode_language(alone).pooled[0]
        b = tiny_model.encode_language(padded).pooled[0]
        assert torch.allclose(a, b, atol=1e-6)


class TestFusion:
    def test_fused_length_is_sum(self, tiny_model):
        tiny_model.eval()
        samples = [make_tiny_sample(i) for i in range(2)]
        batch = collate(samples, tiny_model.config, Modalities())
        video = tiny_model.encode_video(batch.vision, batch.mel, batch.mel_row_mask)
        lang = tiny_model.encode_language(batch.lang)
        fused = tiny_model.fuse(video, lang)
        assert fused.sequence.shape[1] == video.sequence.shape[1] + lang.sequence.shape[1]
        assert torch.equal(fused.pooled, fused.sequence[:, 0])

    def test_identity_configured_fusion_returns_row_zero(self):
        # zeroed attention/FFN output projections make each pre-norm block an
        # exact identity, so the fused pooled vector is input row 0
        cfg = ModelConfig(**TINY)
        torch.manual_seed(1)
        model = TwoBranchModel(cfg)
        model.eval()
        block = model.fusion_encoder.blocks[0]
        with torch.no_grad():
            block.proj.weight.zero_()
            block.proj.bias.zero_()
            block.ffn_out.weight.zero_()
            block.ffn_out.bias.zero_()
        x = torch.rand(2, 5, cfg.dim)
        mask = torch.ones(2, 5, dtype=torch.bool)
        out, _ = model.fusion_encoder(x, mask)
        assert torch.allclose(out[:, 0], x[:, 0], atol=1e-6)

    def test_same_input_same_output_eval(self, tiny_model):
        tiny_model.eval()
        samples = [make_tiny_sample(i) for i in range(2)]
        batch = collate(samples, tiny_model.config, Modalities())
        a = tiny_model.encode_batch(batch, Modalities()).pooled
        b = tiny_model.encode_batch(batch, Modalities()).pooled
        assert torch.equal(a, b)

    def test_all_eleven_mask_combinations(self, tiny_model):
        tiny_model.eval()
        cfg = tiny_model.config
        samples = [make_tiny_sample(i, title_len=4, comment_lens=(4, 4), mel_frames=16)
                   for i in range(2)]
        for mask in Modalities.combinations():
            batch = collate(samples, cfg, mask)
            fused = tiny_model.encode_batch(batch, mask)
            expected = fused_seq_len(cfg, mask, 4, [4, 4], 16)
            assert fused.sequence.shape[1] == expected, mask.label()

    def test_empty_branch_rejected_by_fuse(self, tiny_model):
        samples = [make_tiny_sample(0)]
        batch = collate(samples, tiny_model.config, Modalities())
        video = tiny_model.encode_video(batch.vision, batch.mel, batch.mel_row_mask)
        from vlhumor.model import BranchOutput

        empty = BranchOutput(sequence=video.sequence[:, :0], pooled=video.pooled,
                             key_mask=video.key_mask[:, :0])
        with pytest.raises(ValueError, match="non-empty"):
            tiny_model.fuse(video, empty)


class TestClassifier:
    def test_zero_weights_give_half_half(self, tiny_model):
        with torch.no_grad():
            saved = [p.detach().clone() for p in
                     (tiny_model.classifier_hidden.weight, tiny_model.classifier_hidden.bias,
                      tiny_model.classifier_out.weight, tiny_model.classifier_out.bias)]
            for p in (tiny_model.classifier_hidden.weight, tiny_model.classifier_hidden.bias,
                      tiny_model.classifier_out.weight, tiny_model.classifier_out.bias):
                p.zero_()
            probs = tiny_model.classify(torch.rand(4, 8))
            for p, s in zip((tiny_model.classifier_hidden.weight, tiny_model.classifier_hidden.bias,
                             tiny_model.classifier_out.weight, tiny_model.classifier_out.bias), saved):
                p.copy_(s)
        assert torch.allclose(probs, torch.full((4, 2), 0.5))

    def test_log3_logits_give_three_quarters(self, tiny_model):
        with torch.no_grad():
            saved_w = tiny_model.classifier_out.weight.detach().clone()
            saved_b = tiny_model.classifier_out.bias.detach().clone()
            tiny_model.classifier_out.weight.zero_()
            tiny_model.classifier_out.bias.copy_(torch.tensor([math.log(3.0), 0.0]))
            probs = tiny_model.classify(torch.rand(3, 8))
            tiny_model.classifier_out.weight.copy_(saved_w)
            tiny_model.classifier_out.bias.copy_(saved_b)
        assert torch.allclose(probs, torch.tensor([0.75, 0.25]).expand(3, 2), atol=1e-6)

    def test_probabilities_sum_to_one(self, tiny_model):
        probs = tiny_model.classify(torch.randn(1000, 8))
        assert torch.allclose(probs.sum(dim=-1), torch.ones(1000), atol=1e-7)


class TestForwardProperties:
    def test_outputs_finite_after_init(self):
        torch.manual_seed(5)
        model = TwoBranchModel(ModelConfig(**TINY))
        model.eval()
        samples = [make_tiny_sample(i) for i in range(3)]
        batch = collate(samples, model.config, Modalities())
        fused = model.encode_batch(batch, Modalities())
        assert torch.isfinite(fused.sequence).all()
        logits = model(batch, Modalities())
        assert torch.isfinite(logits).all()

    def test_dropout_passes_differ_eval_passes_match(self):
        torch.manual_seed(6)
        model = TwoBranchModel(ModelConfig(**TINY))
        samples = [make_tiny_sample(i) for i in range(2)]
        batch = collate(samples, model.config, Modalities())
        model.train()
        torch.manual_seed(100)
        a = model.encode_batch(batch, Modalities()).pooled.detach()
        b = model.encode_batch(batch, Modalities()).pooled.detach()
        assert not torch.equal(a, b)
        model.eval()
        c = model.encode_batch(batch, Modalities()).pooled
        d = model.encode_batch(batch, Modalities()).pooled
        assert torch.equal(c, d)

    def test_masked_modality_content_ignored(self):
        torch.manual_seed(7)
        model = TwoBranchModel(ModelConfig(**TINY))
        model.eval()
        mask = Modalities(audio=False)
        samples = [make_tiny_sample(i) for i in range(2)]
        batch_a = collate(samples, model.config, mask)
        noisy = [make_tiny_sample(i) for i in range(2)]
        for s in noisy:
            s.mel[:] = 0.123
        batch_b = collate(noisy, model.config, mask)
        a = model.encode_batch(batch_a, mask).pooled
        b = model.encode_batch(batch_b, mask).pooled
        assert torch.equal(a, b)

    def test_full_scale_shape_suite(self):
        torch.manual_seed(8)
        model = TwoBranchModel(FULL)
        model.eval()
        samples = [full_size_sample(i) for i in range(2)]
        batch = collate(samples, FULL, Modalities())
        video = model.encode_video(batch.vision, batch.mel, batch.mel_row_mask)
        assert video.sequence.shape[1] == 522
        lang = model.encode_language(batch.lang)
        assert lang.sequence.shape[1] == 179
        fused = model.fuse(video, lang)
        assert fused.sequence.shape[1] == 701

    def test_gradients_flow_everywhere(self):
        torch.manual_seed(9)
        model = TwoBranchModel(ModelConfig(**TINY))
        model.train()
        samples = [make_tiny_sample(i) for i in range(2)]
        batch = collate(samples, model.config, Modalities())
        views = model.pretrain_views(batch, batch, Modalities())
        from vlhumor.objective import pretrain_loss

        loss = pretrain_loss(views, model.temperature).total
        loss.backward()
        for name, p in model.named_parameters():
            if name.startswith("classifier"):
                continue  # the contrastive objective does not touch the head
            assert p.grad is not None, name
            assert torch.isfinite(p.grad).all(), name
