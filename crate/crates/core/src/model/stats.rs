//! Receptive field and parameter / MAC accounting.

use super::ConvNet;
use crate::error::{Error, Result};
use crate::linearize::check_linearizable;

/// Input frames that influence one output column.
///
/// Each layer widens the field by `K - 1` steps of its input frame rate, so
/// layers after a strided layer count `s` input frames per step. For a
/// net strided only in its first layer this is `K1 + s1 * Σ (K_l - 1)`.
pub fn receptive_field(net: &(impl ConvNet + ?Sized)) -> usize {
    let mut rate = 1;
    let mut rf = 1;
    for l in net.layers() {
        rf += (l.layer.kernel() - 1) * rate;
        rate *= l.layer.stride();
    }
    rf
}

/// Input frames of implicit left context held by a freshly started
/// streaming pipeline: the sum of every layer's `K - s` history expressed at
/// the input frame rate.
pub fn stream_left_context(net: &(impl ConvNet + ?Sized)) -> usize {
    let mut rate = 1;
    let mut ctx = 0;
    for l in net.layers() {
        ctx += l.layer.history_len() * rate;
        rate *= l.layer.stride();
    }
    ctx
}

pub fn count_params(net: &(impl ConvNet + ?Sized)) -> usize {
    net.layers().iter().map(|l| l.layer.param_count()).sum()
}

pub fn bias_count(net: &(impl ConvNet + ?Sized)) -> usize {
    net.layers().iter().map(|l| l.layer.bias().len()).sum()
}

/// Multiply-accumulates for one inference step of the linearized network.
///
/// Only defined when every layer emits exactly one column per step, i.e.
/// the net is linearizable at chunk size `s1`.
pub fn count_macs_per_step(net: &(impl ConvNet + ?Sized)) -> Result<usize> {
    let report = check_linearizable(net, net.first_stride());
    if !report.compliant {
        return Err(Error::NotLinearizable(report));
    }
    Ok(net
        .layers()
        .iter()
        .map(|l| l.layer.out_channels() * l.layer.in_channels() * l.layer.kernel())
        .sum())
}
