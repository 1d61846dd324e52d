import struct

import pytest
import torch

from relocgan.checkpoint import (Checkpoint, CheckpointError, decode_checkpoint, decode_delta, encode_checkpoint,
                                 encode_delta, export_delta, import_delta, load_checkpoint, save_checkpoint)
from relocgan.networks import ArchConfig, ConfigError, GeneratorBundle
from relocgan.training import generate, transfer


@pytest.fixture(scope="module")
def transferred(tiny_source, tiny_target_images):
    return transfer(tiny_source, tiny_target_images, "constant", budget_kimg=0.04, seed=1, log_every=0)


class TestContainer:
    def test_save_load_save_identical(self, tmp_path, tiny_source, transferred):
        for ckpt in (tiny_source, transferred):
            p1 = save_checkpoint(ckpt, tmp_path / "a.ckpt")
            p2 = save_checkpoint(load_checkpoint(p1), tmp_path / "b.ckpt")
            assert p1.read_bytes() == p2.read_bytes()

    def test_adaptive_and_state_round_trip(self, tiny_source, tiny_target_images):
        ckpt = transfer(tiny_source, tiny_target_images, "adaptive", budget_kimg=0.04, seed=2, log_every=0)
        data = encode_checkpoint(ckpt)
        back = decode_checkpoint(data)
        assert encode_checkpoint(back) == data
        assert back.state.step == ckpt.state.step
        assert back.state.pl_mean == ckpt.state.pl_mean
        assert torch.equal(back.state.rng_state, ckpt.state.rng_state)
        for k, v in ckpt.modules["adaptive:target"].items():
            assert torch.equal(back.modules["adaptive:target"][k], v)

    def test_generation_survives_round_trip(self, transferred):
        back = decode_checkpoint(encode_checkpoint(transferred))
        z = torch.randn(4, transferred.arch.d_z)
        for a, b in zip(generate(transferred, z), generate(back, z)):
            assert torch.equal(a, b)
        assert back.bundle.frozen

    def test_truncated(self, transferred):
        data = encode_checkpoint(transferred)
        for cut in (10, len(data) // 2, len(data) - 1):
            with pytest.raises(CheckpointError):
                decode_checkpoint(data[:cut])

    def test_corrupted_byte(self, transferred):
        data = bytearray(encode_checkpoint(transferred))
        data[len(data) // 2] ^= 0xFF
        with pytest.raises(CheckpointError):
            decode_checkpoint(bytes(data))

    def test_version_mismatch(self, transferred):
        data = encode_checkpoint(transferred)
        bumped = data[:4] + struct.pack("<I", 99) + data[8:]
        with pytest.raises(CheckpointError, match="version"):
            decode_checkpoint(bumped)

    def test_bad_magic(self):
        with pytest.raises(CheckpointError):
            decode_checkpoint(b"XXXX" + bytes(100))

    def test_atomic_write_leaves_no_temp(self, tmp_path, tiny_source):
        save_checkpoint(tiny_source, tmp_path / "s.ckpt")
        assert [p.name for p in tmp_path.iterdir()] == ["s.ckpt"]


class TestDeltaExport:
    def test_round_trip(self, tmp_path, tiny_arch):
        delta = torch.randn(tiny_arch.n_layers, tiny_arch.d_w)
        path = export_delta(delta, tmp_path / "d.dltw")
        assert path.stat().st_size == 16 + 4 * delta.numel()
        assert torch.equal(import_delta(path, tiny_arch), delta)

    def test_mismatched_arch(self, tiny_arch, toy_arch):
        data = encode_delta(torch.zeros(tiny_arch.n_layers, tiny_arch.d_w))
        with pytest.raises(ConfigError):
            decode_delta(data, toy_arch)

    def test_truncated(self):
        data = encode_delta(torch.zeros(5, 4))
        with pytest.raises(CheckpointError):
            decode_delta(data[:-4])

    def test_one_source_many_targets(self, tmp_path, tiny_source, tiny_arch):
        # a source checkpoint plus three offset files reconstruct three distinct target generators
        src_path = save_checkpoint(tiny_source, tmp_path / "src.ckpt")
        z = torch.randn(3, tiny_arch.d_z, generator=torch.Generator().manual_seed(0))
        outputs = []
        for i in range(3):
            delta = torch.randn(tiny_arch.n_layers, tiny_arch.d_w, generator=torch.Generator().manual_seed(i))
            path = export_delta(delta, tmp_path / f"t{i}.dltw")
            ckpt = load_checkpoint(src_path)
            ckpt.deltas["target"] = import_delta(path, ckpt.arch)
            _, tgt = generate(ckpt, z, "constant")
            with torch.no_grad():
                w = ckpt.bundle.mapping(z)[:, None].expand(-1, tiny_arch.n_layers, -1) + delta
                assert torch.equal(tgt, ckpt.bundle.synthesis(w))
            outputs.append(tgt)
        assert not torch.equal(outputs[0], outputs[1]) and not torch.equal(outputs[1], outputs[2])
