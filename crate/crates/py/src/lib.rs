//! Python bindings: feature extraction, the disentangling loss, corpus
//! generation, checkpoint inference and the evaluation probes.

#[pyo3::pymodule]
mod cspc {
    use std::path::PathBuf;

    use candle_core::{Device, Tensor};
    use pyo3::exceptions::PyValueError;
    use pyo3::prelude::*;

    use cspc_core::acoustic::TextSequence;
    use cspc_core::checkpoint::{load_checkpoint, Checkpoint};
    use cspc_core::corpus::{self, CorpusSpec};
    use cspc_core::eval::{self, ProbeOptions, ProbeTarget};
    use cspc_core::frontend::{self, AifProvider, AifSource, FrontendConfig};
    use cspc_core::pipeline;
    use cspc_core::sdm::{self, EmbeddingRole};

    fn py_err(e: impl std::fmt::Display) -> PyErr {
        PyValueError::new_err(e.to_string())
    }

    fn rows(data: &[f32], cols: usize) -> Vec<Vec<f32>> {
        data.chunks(cols).map(<[f32]>::to_vec).collect()
    }

    fn matrix(rows: &[Vec<f32>]) -> PyResult<Tensor> {
        let cols = rows.first().map_or(0, Vec::len);
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        if flat.len() != rows.len() * cols {
            return Err(py_err("ragged matrix"));
        }
        Tensor::from_vec(flat, (rows.len(), cols), &Device::Cpu).map_err(py_err)
    }

    /// Number of mel frames for a waveform of `n_samples` at 16 kHz, or
    /// None when it is shorter than one window.
    #[pyfunction]
    fn frame_count(n_samples: usize) -> PyResult<Option<usize>> {
        FrontendConfig::default()
            .frame_count(n_samples)
            .map_err(py_err)
    }

    /// Log-mel spectrogram of a 16 kHz waveform, one list per frame.
    #[pyfunction]
    fn compute_mel(waveform: Vec<f32>) -> PyResult<Vec<Vec<f32>>> {
        let mel = frontend::compute_mel(&waveform, &FrontendConfig::default()).map_err(py_err)?;
        Ok(rows(mel.data(), mel.n_mels()))
    }

    /// Sum of squared paired dot products between speaker and emotion rows.
    #[pyfunction]
    fn orthogonality_loss(speaker: Vec<Vec<f32>>, emotion: Vec<Vec<f32>>) -> PyResult<f64> {
        let s = matrix(&speaker)?
            .to_dtype(candle_core::DType::F64)
            .map_err(py_err)?;
        let e = matrix(&emotion)?
            .to_dtype(candle_core::DType::F64)
            .map_err(py_err)?;
        sdm::orthogonality_loss(&s, &e)
            .and_then(|t| Ok(t.to_scalar::<f64>()?))
            .map_err(py_err)
    }

    /// Writes a synthetic corpus and returns the manifest path.
    #[pyfunction]
    #[pyo3(signature = (directory, seed=13, items_per_cell=40, full_factorial=false))]
    fn generate_corpus(
        directory: PathBuf,
        seed: u64,
        items_per_cell: usize,
        full_factorial: bool,
    ) -> PyResult<PathBuf> {
        let spec = CorpusSpec {
            seed,
            items_per_cell,
            target_speaker_neutral_only: !full_factorial,
            ..CorpusSpec::default()
        };
        Ok(corpus::generate_corpus(&spec, &directory)
            .map_err(py_err)?
            .manifest)
    }

    /// Held-out accuracy of a linear probe. Returns
    /// `(accuracy, chance_level, n_eval)`.
    #[pyfunction]
    #[pyo3(signature = (embeddings, labels, n_classes, seed=13, heldout_fraction=0.3))]
    fn train_probe(
        embeddings: Vec<Vec<f32>>,
        labels: Vec<usize>,
        n_classes: usize,
        seed: u64,
        heldout_fraction: f64,
    ) -> PyResult<(f64, f64, usize)> {
        let opts = ProbeOptions {
            seed,
            heldout_fraction,
            ..ProbeOptions::default()
        };
        let r = eval::train_probe(
            &embeddings,
            &labels,
            n_classes,
            EmbeddingRole::Emotion,
            ProbeTarget::EmotionLabel,
            &opts,
        )
        .map_err(py_err)?;
        Ok((r.accuracy, r.chance_level, r.n_eval))
    }

    /// One-sided binomial sign test of per-item successes against `chance`.
    #[pyfunction]
    fn sign_test(outcomes: Vec<bool>, chance: f64) -> f64 {
        eval::sign_test(&outcomes, chance)
    }

    /// A trained model loaded from a checkpoint.
    #[pyclass]
    struct Model {
        inner: Checkpoint,
    }

    #[pymethods]
    impl Model {
        #[staticmethod]
        fn load(path: PathBuf) -> PyResult<Self> {
            Ok(Self {
                inner: load_checkpoint(&path).map_err(py_err)?,
            })
        }

        #[getter]
        fn step(&self) -> u64 {
            self.inner.step()
        }

        #[getter]
        fn ablation(&self) -> String {
            self.inner.train.ablation.label()
        }

        #[getter]
        fn n_speakers(&self) -> usize {
            self.inner.model.n_speakers
        }

        /// Mel frames for `text` spoken by `speaker_id` with the emotion of
        /// the reference `.mel`/`.wav` file.
        #[pyo3(signature = (text, reference, speaker_id, max_frames=400, aif_seed=7))]
        fn synthesize(
            &self,
            text: &str,
            reference: PathBuf,
            speaker_id: usize,
            max_frames: usize,
            aif_seed: u64,
        ) -> PyResult<Vec<Vec<f32>>> {
            let vocab = &self.inner.model.vocab;
            let ids = vocab.encode(text).map_err(py_err)?;
            let text = TextSequence::new(ids, vocab.len()).map_err(py_err)?;
            let mel = corpus::load_audio(&reference, &FrontendConfig::default()).map_err(py_err)?;
            let aif = AifProvider::Stub { seed: aif_seed }
                .extract(AifSource::Mel(&mel))
                .map_err(py_err)?;
            let out = pipeline::synthesize(
                &self.inner.state.model,
                &text,
                &mel,
                &aif,
                speaker_id,
                self.inner.train.ablation,
                max_frames,
            )
            .map_err(py_err)?;
            Ok(rows(out.mel.data(), out.mel.n_mels()))
        }
    }
}
