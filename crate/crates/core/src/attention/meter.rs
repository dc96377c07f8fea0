/// Tracks live bytes of transient attention buffers and their high-water mark.
#[derive(Debug, Default, Clone)]
pub struct BufferMeter {
    current: usize,
    peak: usize,
}

impl BufferMeter {
    pub fn alloc(&mut self, bytes: usize) {
        self.current += bytes;
        self.peak = self.peak.max(self.current);
    }

    pub fn free(&mut self, bytes: usize) {
        self.current = self.current.saturating_sub(bytes);
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn peak(&self) -> usize {
        self.peak
    }
}
