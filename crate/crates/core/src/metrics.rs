//! Evaluation metrics over negative log-likelihoods in nats.

/// Nats per character to bits per character.
pub fn bits_per_character(nll_nats_per_char: f64) -> f64 {
    nll_nats_per_char / std::f64::consts::LN_2
}

/// exp(total nats / word count).
pub fn word_perplexity(nll_nats_total: f64, n_words: usize) -> f64 {
    assert!(n_words > 0, "perplexity over zero words");
    (nll_nats_total / n_words as f64).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bpc_hand_values() {
        assert!((bits_per_character(std::f64::consts::LN_2) - 1.0).abs() < 1e-15);
        assert_eq!(bits_per_character(0.0), 0.0);
        // uniform over 27 symbols
        let got = bits_per_character(27.0f64.ln());
        assert!((got - 4.754887502163469).abs() < 1e-12);
    }

    #[test]
    fn bpc_round_trips() {
        let nll = 1.2345678901234567;
        let back = bits_per_character(nll) * std::f64::consts::LN_2;
        assert!((back - nll).abs() < 1e-12);
    }

    #[test]
    fn perplexity_hand_values() {
        assert_eq!(word_perplexity(0.0, 10), 1.0);
        let n = 37;
        let uniform = word_perplexity(n as f64 * 16000.0f64.ln(), n);
        assert!((uniform - 16000.0).abs() < 1e-9);
        let hundred = word_perplexity(n as f64 * 100.0f64.ln(), n);
        assert!((hundred - 100.0).abs() < 1e-11);
    }
}
