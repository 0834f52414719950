use std::ops::Range;
use std::sync::{Mutex, MutexGuard};

use super::{DeviceImage, LineAddr, Medium, PersistenceModel};
use crate::Result;

/// [`Medium`] backed by a [`PersistenceModel`]; serializes access to it.
#[derive(Debug)]
pub struct SimMedium {
    model: Mutex<PersistenceModel>,
}

impl SimMedium {
    pub fn new(size: u64) -> Self {
        Self::from_model(PersistenceModel::new(size))
    }

    pub fn from_image(image: impl Into<DeviceImage>) -> Self {
        Self::from_model(PersistenceModel::from_image(image))
    }

    pub fn from_model(model: PersistenceModel) -> Self {
        SimMedium {
            model: Mutex::new(model),
        }
    }

    pub fn model(&self) -> MutexGuard<'_, PersistenceModel> {
        self.model.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn into_model(self) -> PersistenceModel {
        self.model.into_inner().unwrap_or_else(|e| e.into_inner())
    }
}

impl Medium for SimMedium {
    fn len(&self) -> u64 {
        self.model().len()
    }

    fn store(&self, offset: u64, data: &[u8]) -> Result<()> {
        self.model().store(offset, data)
    }

    fn flush_line(&self, line: LineAddr) -> Result<()> {
        self.model().flush_line(line)
    }

    fn fence(&self) {
        self.model().fence()
    }

    fn uncached_atomic_write(&self, offset: u64, word: u64) -> Result<()> {
        self.model().uncached_atomic_write(offset, word)
    }

    fn read(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        self.model().read_volatile_into(offset, buf)
    }

    fn mark_uncached(&self, range: Range<u64>) -> Result<()> {
        self.model().mark_uncached(range)
    }

    fn flush_range(&self, offset: u64, len: u64) -> Result<()> {
        let mut model = self.model();
        for line in LineAddr::span(offset, len) {
            model.flush_line(line)?;
        }
        Ok(())
    }
}
