use crate::error::{Error, Result};
use crate::grid::{GridShape, TokenGrid};

/// One clean training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub id: String,
    pub grid: TokenGrid,
    pub weight: f64,
    pub class: Option<u32>,
}

impl DatasetItem {
    pub fn new(id: impl Into<String>, grid: TokenGrid) -> Self {
        DatasetItem {
            id: id.into(),
            grid,
            weight: 1.0,
            class: None,
        }
    }

    pub fn with_class(mut self, class: u32) -> Self {
        self.class = Some(class);
        self
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }
}

/// Check that a dataset is nonempty, positively weighted and homogeneous in
/// shape and `K`; returns the shared shape and `K`.
pub fn validate_items(items: &[DatasetItem]) -> Result<(GridShape, usize)> {
    let first = items
        .first()
        .ok_or_else(|| Error::Config("dataset is empty".into()))?;
    for item in items {
        if !(item.weight > 0.0 && item.weight.is_finite()) {
            return Err(Error::Validation(format!(
                "item {} has non-positive weight {}",
                item.id, item.weight
            )));
        }
        if item.grid.shape() != first.grid.shape() || item.grid.k() != first.grid.k() {
            return Err(Error::Shape(format!(
                "item {} differs in shape or K from item {}",
                item.id, first.id
            )));
        }
    }
    Ok((first.grid.shape().clone(), first.grid.k()))
}
