/** Wire types mirrored from the service's SSE stream. */

export interface TraceEvent {
  kind: string;
  seq: number;
  payload: Record<string, unknown>;
  ts: number;
  session_id: string;
}

export interface Citation {
  sentence_index: number;
  source_id: string;
  score: number;
}

export interface SentenceSpan {
  start: number;
  end: number;
}

export interface AnswerPayload {
  text: string;
  sentences: SentenceSpan[];
  citations: Citation[];
}

export interface PassageCard {
  subQueryIndex: number;
  sourceId: string;
  members: string[];
}

export interface SubAnswer {
  subQueryIndex: number;
  text: string;
}

export type Role = "user" | "assistant" | "clarification" | "error";

export interface ChatMessage {
  role: Role;
  text: string;
  answer?: AnswerPayload;
  questions?: string[];
}
