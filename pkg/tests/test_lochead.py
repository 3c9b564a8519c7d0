import numpy as np
import pytest
import torch

from pixelalign.langmodel import DecodeResult
from pixelalign.lochead import LocationHead, MissingEOSError, canonical_box, eos_box
from pixelalign.textcodec import EOS_ID


def test_canonical_box_orders_coordinates():
    assert canonical_box((0.8, 0.2, 0.3, 0.9)) == (0.3, 0.2, 0.8, 0.9)
    assert canonical_box((0.1, 0.7, 0.5, 0.2)) == (0.1, 0.2, 0.5, 0.7)
    assert canonical_box((0.1, 0.2, 0.3, 0.4)) == (0.1, 0.2, 0.3, 0.4)


def test_head_shapes():
    torch.manual_seed(0)
    head = LocationHead(16)
    assert head(torch.rand(5, 16)).shape == (5, 4)
    assert head(torch.rand(2, 7, 16)).shape == (2, 7, 4)
    assert head.locate(torch.rand(3, 16)).shape == (3, 4)


def test_zero_weight_head_outputs_zeros():
    head = LocationHead(16)
    with torch.no_grad():
        for p in head.parameters():
            p.zero_()
    out = head.locate(torch.rand(4, 16))
    assert np.array_equal(out, np.zeros((4, 4), dtype=np.float32))


def test_eos_box_reads_the_final_hidden_row():
    torch.manual_seed(1)
    head = LocationHead(16)
    hidden = torch.rand(3, 16)
    result = DecodeResult(tokens=[4, 5, EOS_ID], hidden=hidden, ended_with_eos=True)
    box = eos_box(result, head)
    with torch.no_grad():
        expected = canonical_box(head(hidden[-1]).tolist())
    assert box == expected
    assert box[0] <= box[2] and box[1] <= box[3]


def test_eos_box_requires_a_terminated_decode():
    head = LocationHead(16)
    hidden = torch.rand(2, 16)
    with pytest.raises(MissingEOSError):
        eos_box(DecodeResult(tokens=[4, 5], hidden=hidden, ended_with_eos=False), head)
    with pytest.raises(MissingEOSError):
        eos_box(DecodeResult(tokens=[], hidden=torch.zeros(0, 16),
                             ended_with_eos=False), head)
    # inconsistent flag: claims EOS but the last token is not one
    with pytest.raises(MissingEOSError):
        eos_box(DecodeResult(tokens=[4, 5], hidden=hidden, ended_with_eos=True), head)
