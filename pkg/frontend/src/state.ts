/**
 * Conversation state as a pure fold over trace events and user actions.
 * No other code mutates state, so replaying a recorded event stream always
 * reproduces the same view.
 */

import type {
  AnswerPayload,
  ChatMessage,
  PassageCard,
  SubAnswer,
  TraceEvent,
} from "./types.js";

export interface ConversationState {
  sessionId: string | null;
  messages: ChatMessage[];
  events: TraceEvent[];
  rewrittenQuery: string | null;
  subQueries: string[];
  passages: PassageCard[];
  subAnswers: SubAnswer[];
  pendingQuestions: string[] | null;
  turnInFlight: boolean;
  banner: string | null;
}

export function initialState(): ConversationState {
  return {
    sessionId: null,
    messages: [],
    events: [],
    rewrittenQuery: null,
    subQueries: [],
    passages: [],
    subAnswers: [],
    pendingQuestions: null,
    turnInFlight: false,
    banner: null,
  };
}

export function sessionStarted(state: ConversationState, sessionId: string): ConversationState {
  return { ...initialState(), sessionId };
}

export function bannerShown(state: ConversationState, message: string): ConversationState {
  return { ...state, banner: message };
}

/** User submitted text: append the bubble and clear the per-turn panels. */
export function turnStarted(state: ConversationState, text: string): ConversationState {
  return {
    ...state,
    messages: [...state.messages, { role: "user", text }],
    events: [],
    rewrittenQuery: null,
    subQueries: [],
    passages: [],
    subAnswers: [],
    pendingQuestions: null,
    turnInFlight: true,
    banner: null,
  };
}

/** The stream broke mid-turn: error bubble, input re-enabled. */
export function streamDropped(state: ConversationState, message: string): ConversationState {
  return {
    ...state,
    messages: [...state.messages, { role: "error", text: message }],
    turnInFlight: false,
  };
}

export function foldEvent(state: ConversationState, event: TraceEvent): ConversationState {
  const next: ConversationState = { ...state, events: [...state.events, event] };
  const payload = event.payload;
  switch (event.kind) {
    case "query_rewritten":
      next.rewrittenQuery = String(payload.text ?? "");
      break;
    case "subqueries_planned":
      next.subQueries = (payload.subqueries as string[] | undefined) ?? [];
      break;
    case "passages_fused": {
      const index = Number(payload.sub_query_index ?? 0);
      const cards = (payload.passages as { source_id: string; members: string[] }[]) ?? [];
      next.passages = [
        ...state.passages,
        ...cards.map((card) => ({
          subQueryIndex: index,
          sourceId: card.source_id,
          members: card.members,
        })),
      ];
      break;
    }
    case "sub_answer":
      next.subAnswers = [
        ...state.subAnswers,
        {
          subQueryIndex: Number(payload.sub_query_index ?? 0),
          text: String(payload.text ?? ""),
        },
      ];
      break;
    case "clarification_asked":
      next.pendingQuestions = (payload.questions as string[] | undefined) ?? [];
      next.messages = [
        ...state.messages,
        { role: "clarification", text: "", questions: next.pendingQuestions },
      ];
      next.turnInFlight = false;
      break;
    case "final_answer": {
      const answer: AnswerPayload = {
        text: String(payload.text ?? ""),
        sentences: (payload.sentences as AnswerPayload["sentences"]) ?? [],
        citations: (payload.citations as AnswerPayload["citations"]) ?? [],
      };
      next.messages = [...state.messages, { role: "assistant", text: answer.text, answer }];
      next.pendingQuestions = null;
      next.turnInFlight = false;
      break;
    }
    case "error":
      next.messages = [
        ...state.messages,
        { role: "error", text: String(payload.message ?? "pipeline error") },
      ];
      next.turnInFlight = false;
      break;
    default:
      break; // plan_chosen, shards_selected, etc. appear in the trace panel only
  }
  return next;
}

export function foldAll(state: ConversationState, events: TraceEvent[]): ConversationState {
  return events.reduce(foldEvent, state);
}
