//! Bit-packed XNOR/popcount execution of binary convolutions.
//!
//! Bit layout: `+1 → 1`, `−1 → 0`, LSB-first within 64-bit words. An
//! activation tensor is stored site-major: for every (image, group, y, x) the
//! group's channels occupy `ceil(cg / 64)` consecutive words. A weight plane
//! stores, for every (output channel, tap), the same channel run. Unused high
//! bits of the last word are zero and masked out of every popcount, and
//! zero-padded sites are skipped so they contribute 0 to the accumulation.

use std::time::Instant;

use rand::Rng;

use crate::autodiff::{ConvGeom, Graph};
use crate::error::{dim_err, Error, Result};
use crate::io::Checkpoint;
use crate::supernet::{BinaryConvExec, ConvRecord, ForwardOptions, Network};
use crate::tensor::Tensor;

const WORD: usize = 64;

fn words_for(n: usize) -> usize {
    n.div_ceil(WORD)
}

fn tail_mask(n: usize) -> u64 {
    match n % WORD {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

fn bit_of(v: f64) -> Result<u64> {
    if v == 1.0 {
        Ok(1)
    } else if v == -1.0 {
        Ok(0)
    } else {
        Err(Error::Contract(format!("cannot pack {v}: operands must be ±1")))
    }
}

/// A ±1 vector of logical length `n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedPlane {
    pub words: Vec<u64>,
    pub n: usize,
    /// Valid bits of the last word.
    pub mask: u64,
}

impl PackedPlane {
    pub fn pack(v: &[f64]) -> Result<Self> {
        let mut words = vec![0u64; words_for(v.len())];
        for (i, &x) in v.iter().enumerate() {
            words[i / WORD] |= bit_of(x)? << (i % WORD);
        }
        Ok(Self {
            words,
            n: v.len(),
            mask: tail_mask(v.len()),
        })
    }

    pub fn unpack(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| if self.words[i / WORD] >> (i % WORD) & 1 == 1 { 1.0 } else { -1.0 })
            .collect()
    }
}

/// How bits are counted. Both variants give identical results.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Popcount {
    /// The CPU's population-count instruction.
    Native,
    /// Byte lookup table.
    Table,
}

const fn byte_table() -> [u8; 256] {
    let mut t = [0u8; 256];
    let mut i = 0;
    while i < 256 {
        t[i] = (i as u8 & 1) + t[i / 2];
        i += 1;
    }
    t
}

static BYTE_COUNTS: [u8; 256] = byte_table();

#[inline(always)]
fn table_count(w: u64) -> u32 {
    w.to_le_bytes().iter().map(|&b| BYTE_COUNTS[b as usize] as u32).sum()
}

impl Popcount {
    /// Native when the running CPU has the instruction.
    pub fn detect() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("popcnt") {
                return Popcount::Native;
            }
            Popcount::Table
        }
        #[cfg(not(target_arch = "x86_64"))]
        {
            Popcount::Native
        }
    }

    #[inline]
    pub fn count(self, w: u64) -> u32 {
        match self {
            Popcount::Native => w.count_ones(),
            Popcount::Table => table_count(w),
        }
    }
}

/// `Σ a_i b_i = 2·popcount(XNOR(a, b) & mask) − n`.
pub fn packed_dot(a: &PackedPlane, b: &PackedPlane) -> Result<i64> {
    packed_dot_with(a, b, Popcount::detect())
}

pub fn packed_dot_with(a: &PackedPlane, b: &PackedPlane, pc: Popcount) -> Result<i64> {
    if a.n != b.n {
        return dim_err(format!("packed lengths differ: {} vs {}", a.n, b.n));
    }
    let last = a.words.len().saturating_sub(1);
    let matches: u32 = a
        .words
        .iter()
        .zip(&b.words)
        .enumerate()
        .map(|(i, (&x, &y))| {
            let m = if i == last { a.mask } else { u64::MAX };
            pc.count(!(x ^ y) & m)
        })
        .sum();
    Ok(2 * matches as i64 - a.n as i64)
}

/// Packed NCHW activations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedActivations {
    pub n: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub groups: usize,
    /// Words per (image, group, site).
    pub stride_words: usize,
    pub bits: Vec<u64>,
}

impl PackedActivations {
    pub fn pack(x: &Tensor, groups: usize) -> Result<Self> {
        let (n, c, h, w) = x.nchw()?;
        if groups == 0 || c % groups != 0 {
            return dim_err(format!("{c} channels do not split into {groups} groups"));
        }
        let cg = c / groups;
        let sw = words_for(cg);
        let mut bits = vec![0u64; n * groups * h * w * sw];
        let d = x.data();
        for b in 0..n {
            for gi in 0..groups {
                for cl in 0..cg {
                    let ch = gi * cg + cl;
                    let plane = &d[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    for (site, &v) in plane.iter().enumerate() {
                        let at = ((b * groups + gi) * h * w + site) * sw + cl / WORD;
                        bits[at] |= bit_of(v)? << (cl % WORD);
                    }
                }
            }
        }
        Ok(Self {
            n,
            channels: c,
            h,
            w,
            groups,
            stride_words: sw,
            bits,
        })
    }
}

/// Packed OIKK weights.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedWeights {
    pub out_channels: usize,
    pub per_group: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride_words: usize,
    pub bits: Vec<u64>,
}

impl PackedWeights {
    pub fn pack(w: &Tensor) -> Result<Self> {
        let (o, cg, kh, kw) = w.nchw()?;
        let sw = words_for(cg);
        let mut bits = vec![0u64; o * kh * kw * sw];
        let d = w.data();
        for oc in 0..o {
            for cl in 0..cg {
                for t in 0..kh * kw {
                    let v = d[(oc * cg + cl) * kh * kw + t];
                    bits[(oc * kh * kw + t) * sw + cl / WORD] |= bit_of(v)? << (cl % WORD);
                }
            }
        }
        Ok(Self {
            out_channels: o,
            per_group: cg,
            kh,
            kw,
            stride_words: sw,
            bits,
        })
    }
}

/// Output-channel range `[lo, hi)` of one shard.
fn shard(total: usize, shards: usize, i: usize) -> (usize, usize) {
    let base = total / shards;
    let extra = total % shards;
    let lo = i * base + i.min(extra);
    (lo, lo + base + usize::from(i < extra))
}

struct ConvPlan<'a> {
    x: &'a PackedActivations,
    wt: &'a PackedWeights,
    beta: &'a [f64],
    geom: ConvGeom,
    ho: usize,
    wo: usize,
}

impl ConvPlan<'_> {
    /// Writes output channels `[lo, hi)` for every image into `out`, laid out
    /// as `[n][hi - lo][ho][wo]`.
    #[inline(always)]
    fn run<F: Fn(u64) -> u32>(&self, lo: usize, hi: usize, out: &mut [f64], count: F) {
        let (x, wt, g) = (self.x, self.wt, &self.geom);
        let sw = wt.stride_words;
        let cg = wt.per_group as i64;
        let mask = tail_mask(wt.per_group);
        let opg = wt.out_channels / x.groups;
        let taps = wt.kh * wt.kw;
        let span = hi - lo;
        for b in 0..x.n {
            for oc in lo..hi {
                let grp = oc / opg;
                let ibase = (b * x.groups + grp) * x.h * x.w;
                let wbase = oc * taps;
                let obase = ((b * span) + (oc - lo)) * self.ho * self.wo;
                for oy in 0..self.ho {
                    for ox in 0..self.wo {
                        let mut acc: i64 = 0;
                        for ky in 0..wt.kh {
                            let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            for kx in 0..wt.kw {
                                let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                if ix < 0 || ix >= x.w as isize {
                                    continue;
                                }
                                let a = &x.bits[(ibase + iy as usize * x.w + ix as usize) * sw..][..sw];
                                let w = &wt.bits[(wbase + ky * wt.kw + kx) * sw..][..sw];
                                let mut m = 0u32;
                                for k in 0..sw - 1 {
                                    m += count(!(a[k] ^ w[k]));
                                }
                                m += count(!(a[sw - 1] ^ w[sw - 1]) & mask);
                                acc += 2 * m as i64 - cg;
                            }
                        }
                        out[obase + oy * self.wo + ox] = self.beta[oc] * acc as f64;
                    }
                }
            }
        }
    }

    fn run_with(&self, lo: usize, hi: usize, out: &mut [f64], pc: Popcount) {
        match pc {
            Popcount::Table => self.run(lo, hi, out, table_count),
            Popcount::Native => {
                #[cfg(target_arch = "x86_64")]
                {
                    if std::arch::is_x86_feature_detected!("popcnt") {
                        // SAFETY: the feature was just detected on this CPU.
                        unsafe { self.run_popcnt(lo, hi, out) };
                        return;
                    }
                }
                self.run(lo, hi, out, u64::count_ones)
            }
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "popcnt")]
    unsafe fn run_popcnt(&self, lo: usize, hi: usize, out: &mut [f64]) {
        self.run(lo, hi, out, u64::count_ones)
    }
}

/// Kernel settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelOptions {
    pub popcount: Popcount,
    /// Output-channel shards, each run on its own thread when > 1.
    pub threads: usize,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self {
            popcount: Popcount::detect(),
            threads: 1,
        }
    }
}

/// Binary convolution on packed operands, scaled per output channel by
/// `beta`. Equals the float convolution of the same ±1 tensors (times β)
/// exactly.
pub fn packed_conv(x: &PackedActivations, wt: &PackedWeights, beta: &[f64], geom: ConvGeom) -> Result<Tensor> {
    packed_conv_with(x, wt, beta, geom, KernelOptions::default())
}

pub fn packed_conv_with(
    x: &PackedActivations,
    wt: &PackedWeights,
    beta: &[f64],
    geom: ConvGeom,
    opts: KernelOptions,
) -> Result<Tensor> {
    if geom.groups != x.groups || x.channels != wt.per_group * x.groups || !wt.out_channels.is_multiple_of(x.groups) {
        return dim_err(format!(
            "packed geometry mismatch: {} channels in {} groups, weights {}x{}",
            x.channels, x.groups, wt.out_channels, wt.per_group
        ));
    }
    if beta.len() != wt.out_channels {
        return dim_err(format!("{} scales for {} output channels", beta.len(), wt.out_channels));
    }
    let ho = geom.out_len(x.h, wt.kh)?;
    let wo = geom.out_len(x.w, wt.kw)?;
    let plan = ConvPlan {
        x,
        wt,
        beta,
        geom,
        ho,
        wo,
    };
    let o = wt.out_channels;
    let shards = opts.threads.clamp(1, o.max(1));
    let area = ho * wo;
    let mut out = vec![0.0; x.n * o * area];
    if shards == 1 {
        plan.run_with(0, o, &mut out, opts.popcount);
    } else {
        let parts: Vec<(usize, usize, Vec<f64>)> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..shards)
                .map(|i| {
                    let plan = &plan;
                    s.spawn(move || {
                        let (lo, hi) = shard(o, shards, i);
                        let mut buf = vec![0.0; x.n * (hi - lo) * area];
                        plan.run_with(lo, hi, &mut buf, opts.popcount);
                        (lo, hi, buf)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("kernel shard panicked")).collect()
        });
        for (lo, hi, buf) in parts {
            let span = hi - lo;
            for b in 0..x.n {
                let src = &buf[b * span * area..(b + 1) * span * area];
                out[(b * o + lo) * area..(b * o + hi) * area].copy_from_slice(src);
            }
        }
    }
    Tensor::new(vec![x.n, o, ho, wo], out)
}

/// Routes the binary convolutions of a forward pass through the packed kernel.
#[derive(Debug, Default)]
pub struct XnorExec {
    pub opts: KernelOptions,
    pub calls: usize,
}

impl BinaryConvExec for XnorExec {
    fn binary_conv(&mut self, input: &Tensor, weight_sign: &Tensor, scale: &[f64], geom: ConvGeom) -> Result<Tensor> {
        self.calls += 1;
        let x = PackedActivations::pack(input, geom.groups)?;
        let w = PackedWeights::pack(weight_sign)?;
        packed_conv_with(&x, &w, scale, geom, self.opts)
    }
}

/// Median and median absolute deviation of repeated timings.
#[derive(Clone, Debug, PartialEq)]
pub struct TimingReport {
    pub runs: usize,
    pub median_ns: f64,
    pub mad_ns: f64,
}

impl TimingReport {
    pub fn from_samples(samples: &[f64]) -> Self {
        let med = median(samples);
        let dev: Vec<f64> = samples.iter().map(|s| (s - med).abs()).collect();
        Self {
            runs: samples.len(),
            median_ns: med,
            mad_ns: median(&dev),
        }
    }
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Storage and operation counts per image. Binary weights cost 1 bit, every
/// other stored number 32 bits; an XNOR-executed MAC counts as 1/64 of a
/// floating-point operation.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryReport {
    pub binary_weights: usize,
    pub float_values: usize,
    pub packed_bits: u64,
    pub float_bits: u64,
    /// `float_bits / packed_bits`.
    pub saving: f64,
    pub binary_macs: u64,
    pub float_macs: u64,
    pub ops: f64,
}

impl MemoryReport {
    pub fn new(net: &Network, convs: &[ConvRecord]) -> Self {
        let binary_weights: usize = convs.iter().filter(|c| c.binary_weights).map(|c| c.weights).sum();
        // β of each binarized conv is stored in float
        let scales: usize = if net.binarize.learn_scale {
            0
        } else {
            convs
                .iter()
                .filter(|c| c.binary_weights)
                .map(|c| net.params.get(&c.name).map_or(0, |w| w.shape()[0]))
                .sum()
        };
        let float_values = net.num_params() - binary_weights + scales;
        let packed_bits = binary_weights as u64 + 32 * float_values as u64;
        let float_bits = 32 * (net.num_params() + scales) as u64;
        let binary_macs: u64 = convs.iter().filter(|c| c.binary_input).map(|c| c.macs).sum();
        let classifier = net.params.get("classifier.weight").map_or(0, Tensor::len) as u64;
        let float_macs: u64 = convs.iter().filter(|c| !c.binary_input).map(|c| c.macs).sum::<u64>() + classifier;
        Self {
            binary_weights,
            float_values,
            packed_bits,
            float_bits,
            saving: float_bits as f64 / packed_bits.max(1) as f64,
            binary_macs,
            float_macs,
            ops: float_macs as f64 + binary_macs as f64 / 64.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct XnorRun {
    pub logits: Tensor,
    /// Wall-clock per image.
    pub timing: TimingReport,
    pub memory: MemoryReport,
    pub packed_calls: usize,
}

/// Evaluation forward of a discrete network with binary convolutions on the
/// packed kernel; float layers run as usual. Timing is repeated `repeats`
/// times and never affects the logits.
pub fn run_network(net: &Network, x: &Tensor, repeats: usize, opts: KernelOptions) -> Result<XnorRun> {
    let n = x.nchw()?.0.max(1);
    let mut samples = Vec::new();
    let mut last = None;
    for _ in 0..repeats.max(1) {
        let mut exec = XnorExec { opts, calls: 0 };
        let t0 = Instant::now();
        let mut g = Graph::new();
        let f = net.forward_with(&mut g, x, None, ForwardOptions::eval(), &mut exec)?;
        samples.push(t0.elapsed().as_nanos() as f64 / n as f64);
        last = Some((g.value(f.logits).clone(), f.convs, exec.calls));
    }
    let (logits, convs, calls) = last.expect("at least one run");
    Ok(XnorRun {
        logits,
        timing: TimingReport::from_samples(&samples),
        memory: MemoryReport::new(net, &convs),
        packed_calls: calls,
    })
}

/// [`run_network`] on the network stored in a retrain checkpoint; refuses a
/// checkpoint written under another configuration.
pub fn run_genotype(cfg: &crate::config::RunConfig, ckpt: &Checkpoint, x: &Tensor, repeats: usize) -> Result<XnorRun> {
    let net = crate::retrain::load_retrained(cfg, ckpt)?;
    run_network(&net, x, repeats, KernelOptions::default())
}

/// One benchmark shape: batch, channels in/out, spatial size, kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchShape {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub size: usize,
    pub k: usize,
}

impl BenchShape {
    pub fn label(&self) -> String {
        format!("{}x{}x{}x{}-k{}-o{}", self.n, self.cin, self.size, self.size, self.k, self.cout)
    }

    pub fn standard() -> Vec<BenchShape> {
        vec![
            BenchShape { n: 1, cin: 64, cout: 64, size: 16, k: 3 },
            BenchShape { n: 1, cin: 128, cout: 128, size: 8, k: 3 },
            BenchShape { n: 1, cin: 256, cout: 256, size: 8, k: 1 },
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub shape: String,
    pub packed_ns: f64,
    pub float_ns: f64,
    pub speedup: f64,
    /// Sum of the packed output; identical to the float output's sum.
    pub checksum: i64,
}

fn random_signs<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Times packed against float convolution (median over `repeats`, packing
/// of the weights excluded, packing of the activations included).
pub fn bench<R: Rng + ?Sized>(shapes: &[BenchShape], repeats: usize, opts: KernelOptions, rng: &mut R) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for s in shapes {
        let x = random_signs(&[s.n, s.cin, s.size, s.size], rng);
        let w = random_signs(&[s.cout, s.cin, s.k, s.k], rng);
        let geom = ConvGeom::new(1, s.k / 2);
        let beta = vec![1.0; s.cout];
        let pw = PackedWeights::pack(&w)?;
        let (mut pt, mut ft) = (Vec::new(), Vec::new());
        let mut outs = None;
        for _ in 0..repeats.max(1) {
            let t0 = Instant::now();
            let px = PackedActivations::pack(&x, 1)?;
            let p = packed_conv_with(&px, &pw, &beta, geom, opts)?;
            pt.push(t0.elapsed().as_nanos() as f64);
            let t1 = Instant::now();
            let f = crate::autodiff::kernels::conv2d_forward_direct(&x, &w, &geom)?;
            ft.push(t1.elapsed().as_nanos() as f64);
            outs = Some((p, f));
        }
        let (p, f) = outs.expect("at least one repeat");
        if p != f {
            return Err(Error::Numerical(format!("packed and float outputs differ on {}", s.label())));
        }
        let (packed_ns, float_ns) = (median(&pt), median(&ft));
        rows.push(BenchRow {
            shape: s.label(),
            packed_ns,
            float_ns,
            speedup: float_ns / packed_ns.max(1.0),
            checksum: p.data().iter().sum::<f64>() as i64,
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["shape", "packed_ns", "float_ns", "speedup", "checksum"])?;
    for r in rows {
        w.write_record([
            r.shape.clone(),
            format!("{:.0}", r.packed_ns),
            format!("{:.0}", r.float_ns),
            format!("{:.3}", r.speedup),
            r.checksum.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}
