//! Bit-level transport: prefix-free codebooks for the codeword alphabet and
//! two channel models (binary symmetric, 64-QAM over AWGN with hard
//! decisions). Everything is seed-deterministic via [`crate::seeds`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::seeds;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("empty symbol distribution")]
    EmptyDistribution,
    #[error("distribution entry {0} is not a probability")]
    BadProbability(f64),
    #[error("codeword index {0} out of range")]
    BadCodeword(usize),
    #[error("bit stream does not decode to {expected} codewords")]
    Undecodable { expected: usize },
}

/// Prefix-free binary codebook over the codeword alphabet, with the tiered
/// transmission costs used by the signaling game (cost of codeword `i`,
/// 1-based, is `ceil(i/5)`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook<T> {
    pub codewords: Vec<Vec<bool>>,
    pub costs: Vec<T>,
}

/// Tiered default cost: codewords come in groups of five of equal cost.
pub fn default_costs<T: Scalar>(n: usize) -> Vec<T> {
    (1..=n).map(|i| T::real(((i + 4) / 5) as f64)).collect()
}

impl<T: Scalar> Codebook<T> {
    pub fn len(&self) -> usize {
        self.codewords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codewords.is_empty()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.codewords.iter().map(Vec::len).collect()
    }

    pub fn kraft_sum(&self) -> f64 {
        self.codewords.iter().map(|c| 0.5f64.powi(c.len() as i32)).sum()
    }

    /// True when no codeword is a prefix of another (always true for the
    /// degenerate single-codeword book).
    pub fn is_prefix_free(&self) -> bool {
        for (i, a) in self.codewords.iter().enumerate() {
            for (j, b) in self.codewords.iter().enumerate() {
                if i != j && a.len() <= b.len() && &b[..a.len()] == a.as_slice() {
                    return false;
                }
            }
        }
        true
    }

    pub fn average_length(&self, probs: &[T]) -> T {
        probs
            .iter()
            .zip(&self.codewords)
            .map(|(&p, c)| p * T::real(c.len() as f64))
            .sum()
    }

    pub fn encode(&self, symbols: &[usize]) -> Result<Vec<bool>, ChannelError> {
        let mut bits = Vec::new();
        for &s in symbols {
            let cw = self.codewords.get(s).ok_or(ChannelError::BadCodeword(s))?;
            bits.extend_from_slice(cw);
        }
        Ok(bits)
    }

    /// Prefix-walk decode of a clean stream into `count` symbols.
    pub fn decode(&self, bits: &[bool], count: usize) -> Result<Vec<usize>, ChannelError> {
        let mut out = Vec::with_capacity(count);
        let mut at = 0;
        'outer: for _ in 0..count {
            for (i, cw) in self.codewords.iter().enumerate() {
                if bits.len() - at >= cw.len() && &bits[at..at + cw.len()] == cw.as_slice() {
                    out.push(i);
                    at += cw.len();
                    continue 'outer;
                }
            }
            return Err(ChannelError::Undecodable { expected: count });
        }
        Ok(out)
    }

    /// Noisy single-codeword decode: the receiver knows the slot length and
    /// picks the closest codeword of that length by Hamming distance, lowest
    /// index on ties. Falls back over all codewords if none matches in length.
    pub fn decode_slot(&self, received: &[bool]) -> usize {
        let same_len: Vec<usize> = (0..self.codewords.len())
            .filter(|&i| self.codewords[i].len() == received.len())
            .collect();
        let pool = if same_len.is_empty() {
            (0..self.codewords.len()).collect()
        } else {
            same_len
        };
        let mut best = pool[0];
        let mut best_d = usize::MAX;
        for i in pool {
            let cw = &self.codewords[i];
            let overlap = cw.len().min(received.len());
            let d = (0..overlap).filter(|&k| cw[k] != received[k]).count()
                + cw.len().abs_diff(received.len());
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// Deterministic Huffman code for the given distribution; ties merge the
/// lowest-numbered nodes first so the codebook is reproducible.
pub fn huffman_codebook<T: Scalar>(probs: &[T]) -> Result<Codebook<T>, ChannelError> {
    if probs.is_empty() {
        return Err(ChannelError::EmptyDistribution);
    }
    for &p in probs {
        let v = p.to_f64_lossy();
        if !(0.0..=1.0 + 1e-9).contains(&v) || !v.is_finite() {
            return Err(ChannelError::BadProbability(v));
        }
    }
    let n = probs.len();
    if n == 1 {
        // A one-word alphabet needs no bits on the wire.
        return Ok(Codebook { codewords: vec![Vec::new()], costs: default_costs(1) });
    }
    // active: (weight, node id); leaves are 0..n, merged nodes count up from n.
    let mut active: Vec<(f64, usize)> =
        probs.iter().enumerate().map(|(i, &p)| (p.to_f64_lossy(), i)).collect();
    let mut children: Vec<Option<(usize, usize)>> = vec![None; n];
    let mut next_id = n;
    while active.len() > 1 {
        active.sort_by(|a, b| {
            a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(&b.1))
        });
        let (wa, ia) = active.remove(0);
        let (wb, ib) = active.remove(0);
        children.push(Some((ia, ib)));
        active.push((wa + wb, next_id));
        next_id += 1;
    }
    let root = active[0].1;
    let mut codewords = vec![Vec::new(); n];
    let mut stack = vec![(root, Vec::new())];
    while let Some((node, prefix)) = stack.pop() {
        match children[node] {
            Some((a, b)) => {
                let mut pa = prefix.clone();
                pa.push(false);
                let mut pb = prefix;
                pb.push(true);
                stack.push((a, pa));
                stack.push((b, pb));
            }
            None => codewords[node] = prefix,
        }
    }
    Ok(Codebook { codewords, costs: default_costs(n) })
}

/// Flips each bit independently with probability `flip_prob`.
pub fn bsc_transmit(bits: &[bool], flip_prob: f64, seed: u64) -> Vec<bool> {
    let mut rng = seeds::rng(seed, 0);
    bits.iter().map(|&b| b ^ rng.gen_bool(flip_prob)).collect()
}

/// Unit-energy 64-QAM constellation coordinate for a 3-bit Gray label.
fn qam_level<T: Scalar>(gray: usize) -> T {
    // Gray label -> level index (inverse Gray), then map 0..8 to odd levels.
    let mut b = gray;
    b ^= b >> 1;
    b ^= b >> 2;
    T::real((2.0 * b as f64 - 7.0) / 42.0f64.sqrt())
}

/// Nearest level index for a received coordinate, then its Gray label.
fn qam_decide<T: Scalar>(v: T) -> usize {
    let scaled = (v.to_f64_lossy() * 42.0f64.sqrt() + 7.0) / 2.0;
    let idx = scaled.round().clamp(0.0, 7.0) as usize;
    idx ^ (idx >> 1)
}

/// 64-QAM over AWGN at the given SNR with hard nearest-point decisions.
/// Bits are consumed six at a time (I then Q, MSB first); the tail is
/// zero-padded to a full symbol and trimmed after demodulation.
/// `snr_db = f64::INFINITY` disables the noise.
pub fn qam64_transmit<T: Scalar>(bits: &[bool], snr_db: f64, seed: u64) -> Vec<bool>
where
    StandardNormal: Distribution<T>,
{
    let mut rng = seeds::rng(seed, 0);
    let sigma_axis = if snr_db.is_infinite() {
        T::zero()
    } else {
        // Total complex noise variance 1/snr, split evenly per axis.
        T::real((1.0 / 10f64.powf(snr_db / 10.0) / 2.0).sqrt())
    };
    let mut out = Vec::with_capacity(bits.len());
    let mut at = 0;
    while at < bits.len() {
        let mut label = [false; 6];
        for (k, l) in label.iter_mut().enumerate() {
            *l = *bits.get(at + k).unwrap_or(&false);
        }
        let gi = (label[0] as usize) << 2 | (label[1] as usize) << 1 | label[2] as usize;
        let gq = (label[3] as usize) << 2 | (label[4] as usize) << 1 | label[5] as usize;
        let mut i_val = qam_level::<T>(gi);
        let mut q_val = qam_level::<T>(gq);
        if sigma_axis > T::zero() {
            let ni: T = StandardNormal.sample(&mut rng);
            let nq: T = StandardNormal.sample(&mut rng);
            i_val += ni * sigma_axis;
            q_val += nq * sigma_axis;
        }
        let gi_hat = qam_decide(i_val);
        let gq_hat = qam_decide(q_val);
        for k in (0..3).rev() {
            out.push((gi_hat >> k) & 1 == 1);
        }
        for k in (0..3).rev() {
            out.push((gq_hat >> k) & 1 == 1);
        }
        at += 6;
    }
    out.truncate(bits.len());
    out
}

/// Channel selection as stored in experiment configs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelModel {
    Bsc { flip_prob: f64 },
    Qam64Awgn { snr_db: f64 },
}

impl ChannelModel {
    pub fn transmit<T: Scalar>(&self, bits: &[bool], seed: u64) -> Vec<bool>
    where
        StandardNormal: Distribution<T>,
    {
        match *self {
            ChannelModel::Bsc { flip_prob } => bsc_transmit(bits, flip_prob, seed),
            ChannelModel::Qam64Awgn { snr_db } => qam64_transmit::<T>(bits, snr_db, seed),
        }
    }

    /// The swept parameter (flip probability or SNR in dB).
    pub fn parameter(&self) -> f64 {
        match *self {
            ChannelModel::Bsc { flip_prob } => flip_prob,
            ChannelModel::Qam64Awgn { snr_db } => snr_db,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn huffman_known_lengths() {
        let cb = huffman_codebook(&[0.5f64, 0.25, 0.25]).unwrap();
        assert_eq!(cb.lengths(), vec![1, 2, 2]);
        assert!(cb.is_prefix_free());
        assert!(cb.kraft_sum() <= 1.0 + 1e-12);

        let uni = huffman_codebook(&[0.25f64; 4]).unwrap();
        assert_eq!(uni.lengths(), vec![2, 2, 2, 2]);
    }

    #[test]
    fn huffman_single_symbol_is_zero_length() {
        let cb = huffman_codebook(&[1.0f64]).unwrap();
        assert_eq!(cb.lengths(), vec![0]);
        assert!(cb.is_prefix_free());
        assert_eq!(cb.average_length(&[1.0]), 0.0);
    }

    #[test]
    fn huffman_average_length_brackets_entropy() {
        let probs = [0.4f64, 0.3, 0.2, 0.05, 0.05];
        let cb = huffman_codebook(&probs).unwrap();
        let h: f64 = probs.iter().map(|p| -p * p.log2()).sum();
        let avg = cb.average_length(&probs);
        assert!(avg >= h - 1e-12 && avg < h + 1.0, "H={h} avg={avg}");
    }

    #[test]
    fn encode_decode_round_trip() {
        let cb = huffman_codebook(&[0.5f64, 0.25, 0.25]).unwrap();
        let syms = vec![0, 2, 1, 0, 0, 2];
        let bits = cb.encode(&syms).unwrap();
        assert_eq!(cb.decode(&bits, syms.len()).unwrap(), syms);
    }

    #[test]
    fn default_costs_are_tiered_by_five() {
        let costs: Vec<f64> = default_costs(7);
        assert_eq!(costs, vec![1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn bsc_extremes() {
        let bits = vec![true, false, true, true, false];
        assert_eq!(bsc_transmit(&bits, 0.0, 3), bits);
        let flipped = bsc_transmit(&bits, 1.0, 3);
        assert!(bits.iter().zip(&flipped).all(|(a, b)| a != b));
        assert_eq!(bsc_transmit(&bits, 0.3, 9), bsc_transmit(&bits, 0.3, 9));
    }

    #[test]
    fn qam_noiseless_round_trip() {
        let bits: Vec<bool> = (0..636).map(|i| (i * 7 + i / 5) % 3 == 1).collect();
        let rx = qam64_transmit::<f64>(&bits, f64::INFINITY, 0);
        assert_eq!(rx, bits);
        // Partial symbol tails survive too.
        let short = vec![true, false, true, true];
        assert_eq!(qam64_transmit::<f64>(&short, f64::INFINITY, 0), short);
    }

    #[test]
    fn decode_slot_picks_nearest_same_length() {
        let cb = huffman_codebook(&[0.5f64, 0.25, 0.25]).unwrap();
        // Codeword 1 with one flipped bit still lands on a length-2 word.
        let mut rx = cb.codewords[1].clone();
        rx[1] = !rx[1];
        let got = cb.decode_slot(&rx);
        assert!(got == 1 || got == 2);
        assert_eq!(cb.decode_slot(&cb.codewords[0]), 0);
    }
}
