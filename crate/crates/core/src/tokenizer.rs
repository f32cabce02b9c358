//! Observation tokenizer: a small valid-convolution stack whose output cells
//! become tokens, plus additive 2-D sinusoidal positional encodings.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvLayer, ConvSpec};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Geometry of the observation and the convolution stack.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub convs: Vec<ConvSpec>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            channels: 4,
            height: 16,
            width: 16,
            convs: vec![
                ConvSpec {
                    filters: 16,
                    kernel: 2,
                    stride: 2,
                },
                ConvSpec {
                    filters: 32,
                    kernel: 2,
                    stride: 2,
                },
            ],
        }
    }
}

/// Inclusive-exclusive pixel rectangle `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRect {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl PixelRect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }

    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

impl TokenizerConfig {
    /// Token grid `(rows, cols)` after the conv stack, validating geometry.
    pub fn grid_dims(&self) -> Result<(usize, usize)> {
        let (mut h, mut w) = (self.height, self.width);
        for c in &self.convs {
            if c.kernel > h || c.kernel > w || (h - c.kernel) % c.stride != 0 || (w - c.kernel) % c.stride != 0
            {
                return Err(Error::config(format!(
                    "conv kernel {} stride {} does not tile {h}x{w}",
                    c.kernel, c.stride
                )));
            }
            h = (h - c.kernel) / c.stride + 1;
            w = (w - c.kernel) / c.stride + 1;
        }
        Ok((h, w))
    }

    pub fn num_tokens(&self) -> Result<usize> {
        let (h, w) = self.grid_dims()?;
        Ok(h * w)
    }

    /// Token dimension: filters of the last convolution (or input channels).
    pub fn token_dim(&self) -> usize {
        self.convs.last().map_or(self.channels, |c| c.filters)
    }

    /// Input-pixel rectangle covered by each token, in token order.
    pub fn receptive_fields(&self) -> Result<Vec<PixelRect>> {
        let (gh, gw) = self.grid_dims()?;
        let project = |mut lo: usize, mut hi: usize| {
            for c in self.convs.iter().rev() {
                lo *= c.stride;
                hi = (hi - 1) * c.stride + c.kernel;
            }
            (lo, hi)
        };
        let mut out = Vec::with_capacity(gh * gw);
        for r in 0..gh {
            for c in 0..gw {
                let (y0, y1) = project(r, r + 1);
                let (x0, x1) = project(c, c + 1);
                out.push(PixelRect { y0, y1, x0, x1 });
            }
        }
        Ok(out)
    }
}

/// 2-D sinusoidal encodings for a `rows×cols` grid, one `d`-vector per cell.
///
/// The first `d/2` channels encode the row, the last `d/2` the column. Each
/// half holds `d/4` sines followed by `d/4` cosines at frequencies
/// `1 / 10000^(2i/(d/2))`.
pub fn encode_positions<F: Scalar>(grid: (usize, usize), d: usize) -> Result<Tensor<F>> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::config(format!(
            "positional encoding dimension must be a positive multiple of 4, got {d}"
        )));
    }
    let (rows, cols) = grid;
    let half = d / 2;
    let quarter = d / 4;
    let mut data = Vec::with_capacity(rows * cols * d);
    let encode_half = |p: usize, out: &mut Vec<F>| {
        let p = p as f64;
        for i in 0..quarter {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
            out.push(F::lit((p * freq).sin()));
        }
        for i in 0..quarter {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
            out.push(F::lit((p * freq).cos()));
        }
    };
    for r in 0..rows {
        for c in 0..cols {
            encode_half(r, &mut data);
            encode_half(c, &mut data);
        }
    }
    Tensor::new([rows * cols, d], data)
}

/// Tokens for one observation.
#[derive(Clone, Debug)]
pub struct TokenGrid {
    /// `n×d` token matrix on the tape.
    pub tokens: Var,
    pub grid_dims: (usize, usize),
}

/// Conv feature extractor shared by every policy.
#[derive(Clone, Debug)]
pub struct Extractor {
    pub config: TokenizerConfig,
    pub convs: Vec<ConvLayer>,
}

impl Extractor {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        config: TokenizerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.grid_dims()?;
        let mut ch = config.channels;
        let mut convs = Vec::new();
        for (i, spec) in config.convs.iter().enumerate() {
            convs.push(ConvLayer::new(store, &format!("{name}.conv{i}"), ch, *spec, rng));
            ch = spec.filters;
        }
        Ok(Extractor { config, convs })
    }

    /// Conv stack output `F×H'×W'`.
    pub fn features<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, obs: Var) -> Result<Var> {
        let c = &self.config;
        let expect = [c.channels, c.height, c.width];
        if tape.shape(obs) != expect {
            return Err(Error::shape("tokenize", tape.shape(obs), &expect));
        }
        let mut x = obs;
        for conv in &self.convs {
            x = conv.forward(tape, store, x)?;
        }
        Ok(x)
    }
}

/// Extractor plus positional encodings.
#[derive(Clone, Debug)]
pub struct Tokenizer<F> {
    pub extractor: Extractor,
    positions: Tensor<F>,
    grid: (usize, usize),
}

impl<F: Scalar> Tokenizer<F> {
    pub fn new(
        store: &mut ParamStore<F>,
        name: &str,
        config: TokenizerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let grid = config.grid_dims()?;
        let positions = encode_positions(grid, config.token_dim())?;
        Ok(Tokenizer {
            extractor: Extractor::new(store, name, config, rng)?,
            positions,
            grid,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn token_dim(&self) -> usize {
        self.extractor.config.token_dim()
    }

    pub fn positions(&self) -> &Tensor<F> {
        &self.positions
    }

    /// `tokens = flatten(conv(obs))ᵀ + positions`, one token per output cell.
    pub fn tokenize(&self, tape: &mut Tape<F>, store: &ParamStore<F>, obs: Var) -> Result<TokenGrid> {
        let feats = self.extractor.features(tape, store, obs)?;
        let d = self.token_dim();
        let n = self.num_tokens();
        let flat = tape.reshape(feats, [d, n])?;
        let tokens = tape.transpose(flat)?;
        let pos = tape.leaf(self.positions.clone());
        let tokens = tape.add(tokens, pos)?;
        Ok(TokenGrid {
            tokens,
            grid_dims: self.grid,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn default_geometry_gives_four_by_four() {
        let cfg = TokenizerConfig::default();
        assert_eq!(cfg.grid_dims().unwrap(), (4, 4));
        assert_eq!(cfg.token_dim(), 32);
    }

    #[test]
    fn receptive_fields_tile_without_gaps() {
        let cfg = TokenizerConfig::default();
        let fields = cfg.receptive_fields().unwrap();
        assert_eq!(fields.len(), 16);
        for y in 0..16 {
            for x in 0..16 {
                let covering = fields.iter().filter(|f| f.contains(y, x)).count();
                assert_eq!(covering, 1, "pixel ({y},{x})");
            }
        }
        assert_eq!(fields[5], PixelRect { y0: 4, y1: 8, x0: 4, x1: 8 });
    }

    #[test]
    fn origin_encoding_is_sin_zero_cos_one() {
        let pe = encode_positions::<f64>((4, 4), 32).unwrap();
        let row0 = &pe.data()[..32];
        for half in 0..2 {
            for i in 0..8 {
                assert_eq!(row0[half * 16 + i], 0.0);
                assert_eq!(row0[half * 16 + 8 + i], 1.0);
            }
        }
    }

    #[test]
    fn same_row_shares_row_half() {
        let pe = encode_positions::<f64>((4, 4), 32).unwrap();
        let tok = |r: usize, c: usize| &pe.data()[(r * 4 + c) * 32..(r * 4 + c + 1) * 32];
        assert_eq!(&tok(2, 0)[..16], &tok(2, 3)[..16]);
        assert_eq!(&tok(0, 1)[16..], &tok(3, 1)[16..]);
    }

    #[test]
    fn encodings_pairwise_distinct() {
        let pe = encode_positions::<f64>((4, 4), 32).unwrap();
        let mut min = f64::INFINITY;
        for a in 0..16 {
            for b in a + 1..16 {
                let d: f64 = (0..32)
                    .map(|k| (pe.at2(a, k) - pe.at2(b, k)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                min = min.min(d);
            }
        }
        assert!(min > 0.0);
    }

    #[test]
    fn odd_dimension_rejected() {
        assert!(matches!(encode_positions::<f64>((2, 2), 7), Err(Error::Config(_))));
        assert!(matches!(encode_positions::<f64>((2, 2), 6), Err(Error::Config(_))));
    }

    #[test]
    fn zero_input_zero_weights_yields_positions() {
        let mut store = ParamStore::<f64>::new();
        let tok = Tokenizer::new(&mut store, "tok", TokenizerConfig::default(), &mut stream(0, &[])).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(shape)).unwrap();
        }
        let mut tape = Tape::new();
        let obs = tape.leaf(Tensor::zeros([4, 16, 16]));
        let grid = tok.tokenize(&mut tape, &store, obs).unwrap();
        assert_eq!(tape.value(grid.tokens), tok.positions());
    }

    #[test]
    fn geometry_mismatch_is_dimension_error() {
        let mut store = ParamStore::<f64>::new();
        let tok = Tokenizer::new(&mut store, "tok", TokenizerConfig::default(), &mut stream(0, &[])).unwrap();
        let mut tape = Tape::new();
        let obs = tape.leaf(Tensor::zeros([4, 12, 16]));
        assert!(matches!(tok.tokenize(&mut tape, &store, obs), Err(Error::Shape { .. })));
    }
}
