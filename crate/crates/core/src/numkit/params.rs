use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::NumError;

/// Named slice of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter storage with a segment table.
///
/// Segments are laid out back to back in declaration order, so they are
/// disjoint and cover the vector exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<Segment>,
}

/// Incremental construction of a [`ParamVector`] layout.
#[derive(Debug, Default)]
pub struct LayoutBuilder {
    layout: Vec<Segment>,
    next: usize,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reserves a segment and returns its offset.
    pub fn add(&mut self, name: &str, shape: &[usize]) -> usize {
        assert!(
            self.layout.iter().all(|s| s.name != name),
            "duplicate segment {name}"
        );
        let seg = Segment {
            name: name.to_string(),
            offset: self.next,
            shape: shape.to_vec(),
        };
        self.next += seg.len();
        self.layout.push(seg);
        self.next - self.layout.last().map_or(0, Segment::len)
    }

    pub fn finish(self) -> ParamVector {
        ParamVector {
            values: vec![0.0; self.next],
            layout: self.layout,
        }
    }
}

impl ParamVector {
    pub fn from_parts(values: Vec<f64>, layout: Vec<Segment>) -> Result<Self, NumError> {
        let pv = Self { values, layout };
        pv.validate()?;
        Ok(pv)
    }

    /// Single anonymous segment covering `values`.
    pub fn flat(values: Vec<f64>) -> Self {
        let n = values.len();
        Self {
            values,
            layout: vec![Segment {
                name: "flat".into(),
                offset: 0,
                shape: vec![n],
            }],
        }
    }

    pub fn validate(&self) -> Result<(), NumError> {
        let mut ranges: Vec<Range<usize>> = self.layout.iter().map(Segment::range).collect();
        ranges.sort_by_key(|r| r.start);
        let mut cursor = 0;
        for r in &ranges {
            if r.start != cursor {
                return Err(NumError::Layout(format!(
                    "segment starting at {} leaves a gap or overlap at {cursor}",
                    r.start
                )));
            }
            cursor = r.end;
        }
        if cursor != self.values.len() {
            return Err(NumError::Layout(format!(
                "segments cover {cursor} of {} values",
                self.values.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.layout.iter().find(|s| s.name == name)
    }

    pub fn segment_values(&self, name: &str) -> Option<&[f64]> {
        self.segment(name).map(|s| &self.values[s.range()])
    }

    pub fn segment_values_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.segment(name)?.range();
        Some(&mut self.values[range])
    }

    /// `self -= lr * grad`.
    pub fn descend(&mut self, grad: &[f64], lr: f64) {
        assert_eq!(grad.len(), self.values.len());
        for (p, g) in self.values.iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_segments_cover_vector() {
        let mut b = LayoutBuilder::new();
        assert_eq!(b.add("w", &[3, 2]), 0);
        assert_eq!(b.add("b", &[3]), 6);
        let pv = b.finish();
        assert_eq!(pv.len(), 9);
        pv.validate().unwrap();
        assert_eq!(pv.segment("b").unwrap().range(), 6..9);
    }

    #[test]
    fn overlap_is_rejected() {
        let layout = vec![
            Segment { name: "a".into(), offset: 0, shape: vec![3] },
            Segment { name: "b".into(), offset: 2, shape: vec![2] },
        ];
        assert!(ParamVector::from_parts(vec![0.0; 4], layout).is_err());
    }

    #[test]
    fn short_cover_is_rejected() {
        let layout = vec![Segment { name: "a".into(), offset: 0, shape: vec![3] }];
        assert!(ParamVector::from_parts(vec![0.0; 4], layout).is_err());
    }
}
