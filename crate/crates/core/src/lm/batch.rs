use super::vocab::{BOS, EOS, PAD};
use super::ModelError;

/// Prompt and answer token ids, without reserved markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

impl Example {
    pub fn new(prompt: Vec<usize>, answer: Vec<usize>) -> Self {
        Self { prompt, answer }
    }

    /// `BOS + prompt`, the context a model conditions on.
    pub fn context(&self) -> Vec<usize> {
        let mut c = Vec::with_capacity(self.prompt.len() + 1);
        c.push(BOS);
        c.extend_from_slice(&self.prompt);
        c
    }
}

/// Right-padded next-token batch. Row `b` occupies `[b*seq_len, (b+1)*seq_len)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    rows: usize,
    seq_len: usize,
    inputs: Vec<usize>,
    targets: Vec<usize>,
    mask: Vec<bool>,
}

impl SequenceBatch {
    pub fn new(
        rows: usize,
        seq_len: usize,
        inputs: Vec<usize>,
        targets: Vec<usize>,
        mask: Vec<bool>,
    ) -> Result<Self, ModelError> {
        let n = rows * seq_len;
        if rows == 0 || seq_len == 0 {
            return Err(ModelError::EmptyBatch);
        }
        if inputs.len() != n || targets.len() != n || mask.len() != n {
            return Err(ModelError::InvalidBatch(format!(
                "expected {n} entries, got inputs {} targets {} mask {}",
                inputs.len(),
                targets.len(),
                mask.len()
            )));
        }
        Ok(Self {
            rows,
            seq_len,
            inputs,
            targets,
            mask,
        })
    }

    /// Builds `BOS prompt answer EOS` rows supervising the answer and `EOS`.
    pub fn from_examples(examples: &[Example]) -> Result<Self, ModelError> {
        Self::build(examples, false)
    }

    /// Like [`SequenceBatch::from_examples`] but supervises every position.
    pub fn full_text(examples: &[Example]) -> Result<Self, ModelError> {
        Self::build(examples, true)
    }

    fn build(examples: &[Example], supervise_prompt: bool) -> Result<Self, ModelError> {
        if examples.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let seq_len = examples
            .iter()
            .map(|e| e.prompt.len() + e.answer.len() + 1)
            .max()
            .unwrap_or(1);
        let n = examples.len() * seq_len;
        let mut inputs = vec![PAD; n];
        let mut targets = vec![PAD; n];
        let mut mask = vec![false; n];
        for (b, e) in examples.iter().enumerate() {
            let mut full = Vec::with_capacity(seq_len + 1);
            full.push(BOS);
            full.extend_from_slice(&e.prompt);
            full.extend_from_slice(&e.answer);
            full.push(EOS);
            let base = b * seq_len;
            for i in 0..full.len() - 1 {
                inputs[base + i] = full[i];
                targets[base + i] = full[i + 1];
                mask[base + i] = supervise_prompt || i >= e.prompt.len();
            }
        }
        Self::new(examples.len(), seq_len, inputs, targets, mask)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn inputs(&self) -> &[usize] {
        &self.inputs
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Flat indices of supervised positions, in row-major order.
    pub fn supervised_positions(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn supervised_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Copy with every position unsupervised.
    pub fn masked_out(&self) -> Self {
        Self {
            mask: vec![false; self.mask.len()],
            ..self.clone()
        }
    }
}
