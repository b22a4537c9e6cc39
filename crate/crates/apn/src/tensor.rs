//! Dense row-major tensors of `f64` plus the on-disk APNT format.
//!
//! The tensor is deliberately minimal: the network graph in this crate is
//! fixed and small, so there is no broadcasting engine and no stride
//! tricks — just a shape and a contiguous buffer.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Dense n-dimensional array of 64-bit floats, row-major.
///
/// Invariant: `data.len() == shape.iter().product()` at all times.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::dim(format!(
                "buffer of {} values cannot fill shape {:?} ({} values)",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// A rank-0 tensor (or any single-element tensor) read as a scalar.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Flat offset of `(i, j)` in a rank-2 tensor.
    #[inline]
    pub fn idx2(&self, i: usize, j: usize) -> usize {
        debug_assert_eq!(self.rank(), 2);
        i * self.shape[1] + j
    }

    /// Flat offset of `(i, j, k)` in a rank-3 tensor.
    #[inline]
    pub fn idx3(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert_eq!(self.rank(), 3);
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[self.idx2(i, j)]
    }

    #[inline]
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.idx3(i, j, k)]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::dim(format!(
                "transpose2 needs a rank-2 tensor, got shape {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    /// Maximum value and its flat index, ties broken by the smallest index
    /// (row-major scan). Empty tensors are rejected at construction time of
    /// the call sites, so this asserts non-emptiness.
    pub fn argmax(&self) -> (usize, f64) {
        assert!(!self.data.is_empty());
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best, self.data[best])
    }
}

// ---------------------------------------------------------------------------
// APNT binary tensor format
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"APNT";
const VERSION: u8 = 1;
const DTYPE_F64: u8 = 0;

impl Tensor {
    /// Serialize in the APNT format: magic `"APNT"`, version byte 1, dtype
    /// byte 0 (= f64), `u32` little-endian ndim, ndim `u32` little-endian
    /// dims, then the row-major little-endian `f64` payload.
    pub fn write_apnt<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION, DTYPE_F64])?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    /// Deserialize an APNT stream. `origin` is only used in error messages.
    pub fn read_apnt<R: Read>(r: &mut R, origin: &Path) -> Result<Tensor> {
        let bad = |detail: String| Error::format("APNT tensor", origin, detail);
        let mut head = [0u8; 6];
        read_exact(r, &mut head, origin)?;
        if &head[0..4] != MAGIC {
            return Err(bad(format!("bad magic {:?}", &head[0..4])));
        }
        if head[4] != VERSION {
            return Err(bad(format!("unsupported version {}", head[4])));
        }
        if head[5] != DTYPE_F64 {
            return Err(bad(format!("unsupported dtype {}", head[5])));
        }
        let mut u32buf = [0u8; 4];
        read_exact(r, &mut u32buf, origin)?;
        let ndim = u32::from_le_bytes(u32buf) as usize;
        if ndim > 8 {
            return Err(bad(format!("implausible ndim {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            read_exact(r, &mut u32buf, origin)?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let count: usize = shape.iter().product();
        if count > (1 << 31) {
            return Err(bad(format!("implausible element count {count}")));
        }
        let mut data = Vec::with_capacity(count);
        let mut f64buf = [0u8; 8];
        for _ in 0..count {
            read_exact(r, &mut f64buf, origin)?;
            data.push(f64::from_le_bytes(f64buf));
        }
        // A trailing byte means the file was not written by this codec.
        let mut probe = [0u8; 1];
        match r.read(&mut probe) {
            Ok(0) => {}
            Ok(_) => return Err(bad("trailing bytes after payload".into())),
            Err(e) => return Err(Error::io(origin, e)),
        }
        Ok(Tensor { shape, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        self.write_apnt(&mut f).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Tensor> {
        let mut f = std::io::BufReader::new(
            std::fs::File::open(path).map_err(|e| Error::io(path, e))?,
        );
        Tensor::read_apnt(&mut f, path)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], origin: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format("APNT tensor", origin, "truncated file")
        } else {
            Error::io(origin, e)
        }
    })
}

// ---------------------------------------------------------------------------
// Bilinear upsampling
// ---------------------------------------------------------------------------

/// Corner-aligned bilinear upsampling of a rank-2 map.
///
/// Output corners coincide with input corners and every output value is a
/// convex combination of the four surrounding grid values, so the output
/// range never exceeds the input range. When `(h_out - 1)` and `(w_out - 1)`
/// are multiples of `(h - 1)` and `(w - 1)` — as in the 8x8 -> 64x64 path
/// used for localization — every input grid point is sampled exactly and the
/// global max and min are preserved exactly.
pub fn bilinear_upsample(map: &Tensor, h_out: usize, w_out: usize) -> Result<Tensor> {
    if map.rank() != 2 {
        return Err(Error::dim(format!(
            "bilinear_upsample needs a rank-2 map, got shape {:?}",
            map.shape()
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    if h_out < h || w_out < w {
        return Err(Error::contract(format!(
            "bilinear_upsample target {}x{} is smaller than source {}x{}",
            h_out, w_out, h, w
        )));
    }
    let scale = |n_in: usize, n_out: usize| -> f64 {
        if n_out <= 1 {
            0.0
        } else {
            (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
        }
    };
    let sy = scale(h, h_out);
    let sx = scale(w, w_out);
    let mut out = Tensor::zeros(&[h_out, w_out]);
    for i in 0..h_out {
        let src_y = i as f64 * sy;
        let y0 = (src_y.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = src_y - y0 as f64;
        for j in 0..w_out {
            let src_x = j as f64 * sx;
            let x0 = (src_x.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = src_x - x0 as f64;
            let top = map.at2(y0, x0) * (1.0 - fx) + map.at2(y0, x1) * fx;
            let bot = map.at2(y1, x0) * (1.0 - fx) + map.at2(y1, x1) * fx;
            out.data[i * w_out + j] = top * (1.0 - fy) + bot * fy;
        }
    }
    Ok(out)
}
