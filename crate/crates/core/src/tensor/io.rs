//! Plain-text tensor fixtures: a `TENSOR b c h w` header followed by the
//! values, written with 17 significant digits so that reads are lossless.

use std::fmt::Write as _;

use super::{Shape, Tensor};
use crate::error::{Error, Result};

pub fn write_tensor(t: &Tensor) -> String {
    let s = t.shape();
    let mut out = format!("TENSOR {} {} {} {}\n", s.batch, s.channels, s.height, s.width);
    let row = s.width.max(1);
    for chunk in t.data().chunks(row) {
        let line: Vec<String> = chunk.iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

/// Concatenates several tensors, each preceded by its header.
pub fn write_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> String {
    tensors.into_iter().map(write_tensor).collect()
}

pub fn read_tensor(text: &str) -> Result<Tensor> {
    let mut all = read_tensors(text)?;
    match all.len() {
        1 => Ok(all.remove(0)),
        n => Err(Error::parse(1, format!("expected one tensor, found {n}"))),
    }
}

pub fn read_tensors(text: &str) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    let mut pending: Option<(Shape, Vec<f64>, usize)> = None;
    for (ln, line) in text.lines().enumerate() {
        let line_no = ln + 1;
        let mut words = line.split_whitespace().peekable();
        if words.peek() == Some(&"TENSOR") {
            if let Some((shape, data, at)) = pending.take() {
                out.push(finish(shape, data, at)?);
            }
            words.next();
            let dims: Vec<usize> = words
                .map(|w| {
                    w.parse::<usize>()
                        .map_err(|_| Error::parse(line_no, format!("bad dimension `{w}`")))
                })
                .collect::<Result<_>>()?;
            if dims.len() != 4 {
                return Err(Error::parse(line_no, "TENSOR header needs four dimensions"));
            }
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            pending = Some((shape, Vec::with_capacity(shape.numel()), line_no));
            continue;
        }
        let Some((_, data, _)) = pending.as_mut() else {
            if line.trim().is_empty() {
                continue;
            }
            return Err(Error::parse(line_no, "values before TENSOR header"));
        };
        for w in words {
            let v = w
                .parse::<f64>()
                .map_err(|_| Error::parse(line_no, format!("bad value `{w}`")))?;
            data.push(v);
        }
    }
    if let Some((shape, data, at)) = pending {
        out.push(finish(shape, data, at)?);
    }
    Ok(out)
}

fn finish(shape: Shape, data: Vec<f64>, header_line: usize) -> Result<Tensor> {
    if data.len() != shape.numel() {
        return Err(Error::parse(
            header_line,
            format!("tensor {shape} declares {} values, found {}", shape.numel(), data.len()),
        ));
    }
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_format() {
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.1, -2.0]).unwrap();
        let s = write_tensor(&t);
        assert!(s.starts_with("TENSOR 1 1 1 2\n"));
        assert_eq!(read_tensor(&s).unwrap(), t);
    }

    #[test]
    fn truncated_payload_rejected() {
        let err = read_tensor("TENSOR 1 1 2 2\n1 2 3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    proptest! {
        #[test]
        fn lossless_roundtrip(values in proptest::collection::vec(-1e300f64..1e300, 1..40)) {
            let n = values.len();
            let t = Tensor::from_vec(Shape::new(1, 1, 1, n), values).unwrap();
            let twice = read_tensors(&write_tensors([&t, &t])).unwrap();
            prop_assert_eq!(twice.len(), 2);
            prop_assert_eq!(&twice[0], &t);
        }
    }
}
